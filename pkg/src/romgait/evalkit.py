"""Gait-tracking evaluation: per-channel MSE against the teacher, reductions, exports.

Channel names follow the published table (pelvis_y, lfoot_x, lfoot_z, rfoot_x,
rfoot_z); in this planar setting "z" is the vertical foot coordinate y.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .gaitdata import CHANNELS, FEATURE_DIM, ReferenceDataset

REPORT_CHANNELS = ("pelvis_y", "lfoot_x", "lfoot_z", "rfoot_x", "rfoot_z")
CHANNEL_MAP = dict(zip(REPORT_CHANNELS, CHANNELS))
ALIGNMENTS = ("none", "phase")


class EmptyDataset(ValueError):
    pass


class ZeroBaselineMse(ArithmeticError):
    """Reduction is undefined because the baseline matches the reference exactly."""


class IoFailure(OSError):
    pass


def _frames(data) -> np.ndarray:
    frames = data.frames if isinstance(data, ReferenceDataset) else np.asarray(data, dtype=float)
    if frames.ndim != 2 or frames.shape[1] != FEATURE_DIM:
        raise ValueError(f"expected (T, {FEATURE_DIM}) gait frames, got {frames.shape}")
    if frames.shape[0] == 0:
        raise EmptyDataset("trajectory has no frames")
    return frames


def phase_lag(reference: np.ndarray, rollout: np.ndarray, max_lag: int | None = None) -> int:
    """Shift (frames) of ``rollout`` maximizing cross-correlation with ``reference`` on x_L.

    The correlation is normalized by the full length, not the overlap, so that
    among the equal peaks of a periodic gait the shortest shift wins.
    """
    a = reference[:, 1] - reference[:, 1].mean()
    b = rollout[:, 1] - rollout[:, 1].mean()
    n = min(len(a), len(b))
    max_lag = n // 2 if max_lag is None else max_lag
    best, best_score = 0, -math.inf
    for lag in range(0, max_lag + 1):
        m = min(len(a), len(b) - lag)
        if m < 2:
            break
        score = float(np.dot(a[:m], b[lag:lag + m])) / n
        if score > best_score:
            best, best_score = lag, score
    return best


def aligned_mse(reference, rollout, alignment: str = "none") -> np.ndarray:
    """Per-channel mean squared difference over the common window."""
    if alignment not in ALIGNMENTS:
        raise ValueError(f"alignment must be one of {ALIGNMENTS}")
    ref, roll = _frames(reference), _frames(rollout)
    if alignment == "phase":
        roll = roll[phase_lag(ref, roll):]
    n = min(len(ref), len(roll))
    diff = ref[:n] - roll[:n]
    return np.mean(diff * diff, axis=0)


def reduction_percent(baseline: float, ours: float) -> float:
    if not baseline > 0:
        raise ZeroBaselineMse("baseline MSE is zero")
    return 100.0 * (baseline - ours) / baseline


@dataclass
class MseReport:
    student_mse: dict
    baseline_mse: dict
    reductions: dict
    average_reduction: float | None
    alignment: str = "none"
    notes: dict = field(default_factory=lambda: {
        "channels": "pelvis_y = root height; lfoot/rfoot x = horizontal, z = vertical foot position "
                    "relative to the root; all divided by nominal standing height"})

    def to_dict(self) -> dict:
        return {"alignment": self.alignment, "student_mse": self.student_mse,
                "baseline_mse": self.baseline_mse, "reduction_percent": self.reductions,
                "average_reduction_percent": self.average_reduction, "notes": self.notes}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def report_from_mse(student_mse, baseline_mse, alignment: str = "none") -> MseReport:
    """Reductions 100 (base - ours) / base per channel; channels with zero baseline are n/a."""
    student_mse = np.asarray(student_mse, dtype=float)
    baseline_mse = np.asarray(baseline_mse, dtype=float)
    if np.any(student_mse < 0) or np.any(baseline_mse < 0):
        raise ValueError("MSE values must be non-negative")
    reductions = {}
    for name, base, ours in zip(REPORT_CHANNELS, baseline_mse, student_mse):
        try:
            reductions[name] = reduction_percent(float(base), float(ours))
        except ZeroBaselineMse:
            reductions[name] = None
    defined = [v for v in reductions.values() if v is not None]
    average = float(np.mean(defined)) if len(defined) == len(REPORT_CHANNELS) else None
    return MseReport(dict(zip(REPORT_CHANNELS, map(float, student_mse))),
                     dict(zip(REPORT_CHANNELS, map(float, baseline_mse))), reductions, average, alignment)


def mse_report(reference, student_rollout, baseline_rollout, alignment: str = "none") -> MseReport:
    return report_from_mse(aligned_mse(reference, student_rollout, alignment),
                           aligned_mse(reference, baseline_rollout, alignment), alignment)


def export_comparison(reference, rollouts: Mapping[str, object], path, report: MseReport | None = None) -> list[Path]:
    """Write one CSV per channel (t, teacher, each policy), an overlay CSV with every
    channel side by side, and the report as JSON. Returns the written paths."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        ref = _frames(reference)
        rolls = {name: _frames(r) for name, r in rollouts.items()}
        n = min([len(ref)] + [len(r) for r in rolls.values()])
        names = list(rolls)
        written = []
        for c, channel in enumerate(REPORT_CHANNELS):
            p = out / f"{channel}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t", "teacher"] + names)
                for t in range(n):
                    w.writerow([t + 1, repr(float(ref[t, c]))] + [repr(float(rolls[k][t, c])) for k in names])
            written.append(p)
        p = out / "overlay.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"{src}.{ch}" for src in ["teacher"] + names for ch in REPORT_CHANNELS])
            for t in range(n):
                row = [t + 1] + [repr(float(v)) for v in ref[t]]
                for k in names:
                    row += [repr(float(v)) for v in rolls[k][t]]
                w.writerow(row)
        written.append(p)
        if report is not None:
            p = out / "report.json"
            p.write_text(report.to_json() + "\n")
            written.append(p)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return written
