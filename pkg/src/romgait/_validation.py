"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array


def check_observations(X, n_features: int, name: str = "X") -> tuple[np.ndarray, bool]:
    """Return a float64 2-D copy-free view of ``X`` and whether it was a single row."""
    arr = np.asarray(X, dtype=float)
    single = arr.ndim == 1
    arr = check_array(arr.reshape(1, -1) if single else arr, dtype=np.float64,
                      ensure_all_finite=True, input_name=name)
    if arr.shape[1] != n_features:
        raise ValueError(f"{name} has {arr.shape[1]} features, expected {n_features}")
    return arr, single


def check_is_fitted(estimator, attribute: str) -> None:
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; call fit() first")


def check_fraction(value: float, name: str, *, low_open: bool = True, high_open: bool = True) -> float:
    value = float(value)
    lo_ok = value > 0 if low_open else value >= 0
    hi_ok = value < 1 if high_open else value <= 1
    if not (lo_ok and hi_ok):
        raise ValueError(f"{name} must lie in {'(' if low_open else '['}0, 1{')' if high_open else ']'}, got {value}")
    return value
