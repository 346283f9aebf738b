"""Tanh-squashed diagonal Gaussian used by both policy learners."""
from __future__ import annotations

import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def gaussian_log_prob(u: np.ndarray, mu: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (u - mu) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def tanh_log_det(u: np.ndarray) -> np.ndarray:
    """sum log(1 - tanh(u)^2), evaluated without cancellation."""
    return np.sum(2.0 * (math.log(2.0) - u - softplus(-2.0 * u)), axis=-1)


def squashed_log_prob(u: np.ndarray, mu: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """log density of a = tanh(u) where u ~ N(mu, exp(log_std)^2)."""
    return gaussian_log_prob(u, mu, log_std) - tanh_log_det(u)


def gaussian_entropy(log_std: np.ndarray) -> np.ndarray:
    return np.sum(log_std + 0.5 * (LOG_2PI + 1.0), axis=-1)
