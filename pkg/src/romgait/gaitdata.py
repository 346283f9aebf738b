"""Reference gait datasets: recording, binary storage, CSV export and summaries.

Binary layout (all little-endian)::

    magic      8 bytes   b"ROMGAIT\\0"
    version    u32
    T          u64       number of frames
    dt         f64       seconds between frames
    meta_len   u32
    meta       meta_len bytes of UTF-8 JSON
    frames     T * 5 f64, row-major
    crc32      u32       over every preceding byte
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

FORMAT_VERSION = 1
MAGIC = b"ROMGAIT\0"
CHANNELS = ("y_com", "x_l", "y_l", "x_r", "y_r")
FEATURE_DIM = len(CHANNELS)
FEATURE_BOUND = 10.0
DEFAULT_T = 2000

_HEADER = struct.Struct("<8sIQdI")
_CRC = struct.Struct("<I")


class DatasetError(ValueError):
    pass


class FormatVersionUnknown(DatasetError):
    pass


class ChecksumMismatch(DatasetError):
    pass


class TruncatedFile(DatasetError):
    pass


class TeacherFellEarly(RuntimeError):
    """The teacher terminated before the requested number of frames."""


def validate_features(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != FEATURE_DIM:
        raise DatasetError(f"gait features must have shape (T, {FEATURE_DIM}), got {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise DatasetError("gait features contain NaN or Inf")
    if np.any(np.abs(frames) >= FEATURE_BOUND):
        raise DatasetError(f"normalized gait features must stay below {FEATURE_BOUND} in magnitude")
    return frames


@dataclass
class ReferenceDataset:
    frames: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = validate_features(self.frames)
        if self.frames.shape[0] < 1:
            raise DatasetError("a dataset needs at least one frame")
        self.metadata = dict(self.metadata)
        self.metadata.setdefault("T", int(self.frames.shape[0]))
        self.metadata.setdefault("format_version", FORMAT_VERSION)
        if self.metadata["T"] != self.frames.shape[0]:
            raise DatasetError(f"metadata T={self.metadata['T']} but {self.frames.shape[0]} frames")

    @property
    def T(self) -> int:
        return int(self.frames.shape[0])

    @property
    def dt(self) -> float:
        return float(self.metadata.get("dt", 1.0 / 60.0))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ReferenceDataset):
            return NotImplemented
        return (self.frames.shape == other.frames.shape
                and self.frames.tobytes() == other.frames.tobytes()
                and self.metadata == other.metadata)


# -- binary format -----------------------------------------------------------------


def dataset_bytes(dataset: ReferenceDataset) -> bytes:
    meta = json.dumps(dataset.metadata, sort_keys=True).encode("utf-8")
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, dataset.T, dataset.dt, len(meta))
    body = head + meta + dataset.frames.astype("<f8").tobytes()
    return body + _CRC.pack(zlib.crc32(body))


def save_dataset(dataset: ReferenceDataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(dataset))


def parse_dataset(raw: bytes) -> ReferenceDataset:
    if len(raw) < _HEADER.size:
        raise TruncatedFile("file shorter than the header")
    magic, version, T, dt, meta_len = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatVersionUnknown("not a gait dataset (bad magic bytes)")
    if version != FORMAT_VERSION:
        raise FormatVersionUnknown(f"unknown format version {version}")
    frames_at = _HEADER.size + meta_len
    expected = frames_at + T * FEATURE_DIM * 8 + _CRC.size
    if len(raw) < expected:
        raise TruncatedFile(f"expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise DatasetError(f"{len(raw) - expected} trailing bytes after checksum")
    (stored,) = _CRC.unpack_from(raw, expected - _CRC.size)
    if zlib.crc32(raw[:expected - _CRC.size]) != stored:
        raise ChecksumMismatch("CRC32 does not match file contents")
    if T < 1:
        raise DatasetError("dataset has no frames")
    metadata = json.loads(raw[_HEADER.size:frames_at].decode("utf-8"))
    frames = np.frombuffer(raw, dtype="<f8", count=T * FEATURE_DIM, offset=frames_at)
    frames = frames.reshape(T, FEATURE_DIM).astype(np.float64)
    if metadata.get("dt", dt) != dt:
        raise DatasetError("header dt disagrees with metadata")
    return ReferenceDataset(frames, metadata)


def load_dataset(path) -> ReferenceDataset:
    return parse_dataset(Path(path).read_bytes())


def export_csv(dataset: ReferenceDataset, path) -> None:
    """Plain-text copy for plotting; not bit-exact."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("t",) + CHANNELS)
        for t, row in enumerate(dataset.frames, start=1):
            writer.writerow([t] + [repr(float(v)) for v in row])


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- recording -----------------------------------------------------------------------


class Policy(Protocol):
    def predict(self, X, deterministic: bool = True): ...


class ZeroPolicy:
    """Scripted controller that applies no torque."""

    def __init__(self, act_dim: int):
        self.act_dim = act_dim

    def predict(self, X, deterministic: bool = True):
        return np.zeros(self.act_dim)


def record_reference(policy: Policy, env, T: int = DEFAULT_T, seed: int = 0,
                     metadata: dict | None = None) -> ReferenceDataset:
    """Roll ``policy`` deterministically for ``T`` control steps, one feature per step.

    Features are divided by ``env.nominal_height``. The episode limit of
    ``env`` is ignored; only a fall raises :class:`TeacherFellEarly`.
    """
    if T < 1:
        raise DatasetError("T must be >= 1")
    obs = env.reset(seed)
    height = env.nominal_height
    frames = np.empty((T, FEATURE_DIM))
    for t in range(T):
        if env.done and not env.terminated:
            env.done = env.truncated = False  # run past the training episode limit
        obs, _, _ = env.step(policy.predict(obs, deterministic=True))
        if env.terminated:
            raise TeacherFellEarly(f"teacher fell after {t + 1} of {T} steps")
        frames[t] = env.gait_feature() / height
    meta = {
        "T": T,
        "dt": float(env.world_config.dt),
        "target_speed": float(env.config.target_speed),
        "normalization_height": float(height),
        "recording_seed": int(seed),
        "format_version": FORMAT_VERSION,
    }
    meta.update(metadata or {})
    return ReferenceDataset(frames, meta)


# -- statistics -----------------------------------------------------------------------


def estimate_period(signal: np.ndarray) -> int | None:
    """Dominant period (frames) from the first autocorrelation peak after the
    autocorrelation turns negative; None for flat or aperiodic signals."""
    x = np.asarray(signal, dtype=float)
    x = x - x.mean()
    if x.size < 4 or not np.any(np.abs(x) > 1e-12):
        return None
    n = x.size
    spec = np.fft.rfft(x, 2 * n)
    ac = np.fft.irfft(spec * np.conj(spec))[:n]
    ac = ac / ac[0]
    below = np.nonzero(ac < 0)[0]
    if below.size == 0:
        return None
    start = below[0]
    half = n // 2
    if start >= half:
        return None
    lag = start + int(np.argmax(ac[start:half]))
    if ac[lag] <= 0:
        return None
    return int(lag)


def dataset_statistics(dataset: ReferenceDataset) -> dict:
    frames = dataset.frames
    stats = {
        name: {"mean": float(frames[:, i].mean()), "std": float(frames[:, i].std()),
               "min": float(frames[:, i].min()), "max": float(frames[:, i].max())}
        for i, name in enumerate(CHANNELS)
    }
    stats["period"] = estimate_period(frames[:, 1]) if dataset.T >= 2 else None
    return stats
