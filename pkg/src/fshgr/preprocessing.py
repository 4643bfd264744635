"""Signal preprocessing: low-pass smoothing, mu-law scaling, min-max
normalization and sliding-window segmentation.

Order applied to each recording:

    Butterworth low-pass -> divide by per-channel max |x| (meta-train)
    -> mu-law -> min-max to [0, 1] (meta-train statistics)

All statistics come from the meta-train split; values from other splits that
fall outside the training range are clamped and counted.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.signal import lfilter

from .errors import FormatError, ParameterError

__all__ = [
    "PreprocessConfig",
    "NormStats",
    "PrepStats",
    "ClampWarning",
    "butterworth_coefficients",
    "butterworth_lowpass",
    "mu_law",
    "minmax_normalize",
    "window_count",
    "segment_windows",
    "fit_prep_stats",
    "apply_prep",
    "save_norm_stats",
    "load_norm_stats",
]


class ClampWarning(UserWarning):
    """Values outside the expected range were clamped."""


@dataclass
class PreprocessConfig:
    fs: float = 2000.0
    cutoff_hz: float = 1.0
    mu: float = 2048.0
    window_ms: float = 200.0
    step_ms: float = 50.0

    def __post_init__(self):
        if self.fs <= 0:
            raise ParameterError(f"sampling rate must be positive, got {self.fs}")
        if not 0 < self.cutoff_hz < self.fs / 2:
            raise ParameterError(f"cutoff {self.cutoff_hz} Hz must lie in (0, {self.fs / 2}) Hz")
        if self.mu <= 0:
            raise ParameterError(f"mu must be positive, got {self.mu}")
        if not 0 < self.window_ms <= 300:
            raise ParameterError(f"window length must be in (0, 300] ms, got {self.window_ms}")
        if self.step_ms <= 0:
            raise ParameterError(f"step must be positive, got {self.step_ms}")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_ms * self.fs / 1000.0))

    @property
    def step_samples(self) -> int:
        return max(1, int(round(self.step_ms * self.fs / 1000.0)))


@dataclass
class NormStats:
    """Per-channel value range learned on one split."""

    mins: np.ndarray
    maxs: np.ndarray
    source: str = "meta_train"

    def __post_init__(self):
        self.mins = np.asarray(self.mins, dtype=np.float64)
        self.maxs = np.asarray(self.maxs, dtype=np.float64)
        if self.mins.shape != self.maxs.shape or self.mins.ndim != 1:
            raise ParameterError(f"mins {self.mins.shape} and maxs {self.maxs.shape} must be matching vectors")

    @property
    def channels(self) -> int:
        return self.mins.size


@dataclass
class PrepStats:
    """Everything learned from meta-train: the max-abs range fed to mu-law
    (stored as a symmetric [-a, a] range) and the post-mu-law min/max."""

    scale: NormStats
    minmax: NormStats


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def butterworth_coefficients(fs: float, cutoff_hz: float) -> tuple[float, float, float]:
    """First-order low-pass via the bilinear transform: returns (b0, b1, a1)."""
    if not 0 < cutoff_hz < fs / 2:
        raise ParameterError(f"cutoff {cutoff_hz} Hz must lie in (0, Nyquist={fs / 2}) Hz")
    k = math.tan(math.pi * cutoff_hz / fs)
    b = k / (1 + k)
    a1 = (k - 1) / (1 + k)
    if not abs(a1) < 1:
        raise ParameterError(f"unstable filter: |a1|={abs(a1)}")
    return b, b, a1


def butterworth_lowpass(x, fs: float, cutoff_hz: float) -> np.ndarray:
    """Filter along axis 0 (time), channels independently, from zero state."""
    b0, b1, a1 = butterworth_coefficients(fs, cutoff_hz)
    x = np.asarray(x, dtype=np.float64)
    return lfilter([b0, b1], [1.0, a1], x, axis=0)


def _clamp(x: np.ndarray, lo, hi) -> tuple[np.ndarray, int]:
    n = int(np.count_nonzero((x < lo) | (x > hi)))
    if n:
        x = np.clip(x, lo, hi)
    return x, n


def mu_law(x, mu: float = 2048.0, *, return_clamped: bool = False):
    """F(x) = sign(x) ln(1 + mu|x|) / ln(1 + mu) on [-1, 1].

    Inputs outside [-1, 1] are clamped first; a ClampWarning reports how many.
    """
    x = np.asarray(x, dtype=np.float64)
    x, n = _clamp(x, -1.0, 1.0)
    if n and not return_clamped:
        warnings.warn(f"mu_law: clamped {n} value(s) to [-1, 1]", ClampWarning, stacklevel=2)
    y = np.sign(x) * np.log1p(mu * np.abs(x)) / math.log1p(mu)
    return (y, n) if return_clamped else y


def minmax_normalize(x, stats: NormStats, *, return_clamped: bool = False):
    """(x - min) / (max - min) per channel (last axis), clamped to [0, 1].

    Degenerate channels (max == min) map to 0.5.
    """
    x = np.asarray(x, dtype=np.float64)
    span = stats.maxs - stats.mins
    flat = span <= 0
    if np.any(flat):
        warnings.warn(f"minmax_normalize: degenerate channel(s) {np.flatnonzero(flat).tolist()} mapped to 0.5", ClampWarning, stacklevel=2)
    safe = np.where(flat, 1.0, span)
    y = (x - stats.mins) / safe
    y = np.where(flat, 0.5, y)
    y, n = _clamp(y, 0.0, 1.0)
    if n and not return_clamped:
        warnings.warn(f"minmax_normalize: clamped {n} value(s) to [0, 1]", ClampWarning, stacklevel=2)
    return (y, n) if return_clamped else y


def window_count(T: int, W: int, S: int) -> int:
    return 0 if T < W else (T - W) // S + 1


def segment_windows(x, W: int, S: int) -> np.ndarray:
    """Windows at offsets 0, S, 2S, ... of a (T, C) signal, as a (n, W, C) view."""
    x = np.asarray(x)
    if W < 1 or S < 1:
        raise ParameterError(f"window {W} and step {S} must be positive")
    if x.shape[0] < W:
        warnings.warn(f"segment_windows: signal of {x.shape[0]} samples is shorter than the window ({W})", stacklevel=2)
        return np.empty((0, W) + x.shape[1:], dtype=x.dtype)
    view = np.lib.stride_tricks.sliding_window_view(x, W, axis=0)[::S]
    return np.moveaxis(view, -1, 1)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def fit_prep_stats(filtered: Iterable[np.ndarray], cfg: PreprocessConfig, source: str = "meta_train") -> PrepStats:
    """Learn max-abs and post-mu-law min/max from already-filtered recordings."""
    filtered = list(filtered)
    if not filtered:
        raise ParameterError("cannot fit normalization statistics on an empty split")
    amax = np.max([np.max(np.abs(x), axis=0) for x in filtered], axis=0)
    amax = np.where(amax > 0, amax, 1.0)
    lo = np.full(amax.shape, np.inf)
    hi = np.full(amax.shape, -np.inf)
    for x in filtered:
        y = mu_law(x / amax, cfg.mu)
        lo = np.minimum(lo, y.min(axis=0))
        hi = np.maximum(hi, y.max(axis=0))
    return PrepStats(NormStats(-amax, amax, source), NormStats(lo, hi, source))


def apply_prep(filtered: np.ndarray, stats: PrepStats, cfg: PreprocessConfig) -> tuple[np.ndarray, int]:
    """Scale, mu-law and min-max one filtered recording. Returns (float32 array, clamp count)."""
    scaled = filtered / stats.scale.maxs
    y, n1 = mu_law(scaled, cfg.mu, return_clamped=True)
    z, n2 = minmax_normalize(y, stats.minmax, return_clamped=True)
    return z.astype(np.float32), n1 + n2


# ---------------------------------------------------------------------------
# FSN1 sidecar: b"FSN1", u32 channels, channels x (f64 min, f64 max)
# ---------------------------------------------------------------------------

NORM_MAGIC = b"FSN1"


def save_norm_stats(path, stats: NormStats) -> None:
    pairs = np.stack([stats.mins, stats.maxs], axis=1).astype("<f8")
    Path(path).write_bytes(NORM_MAGIC + struct.pack("<I", stats.channels) + pairs.tobytes())


def load_norm_stats(path, source: str = "meta_train") -> NormStats:
    buf = Path(path).read_bytes()
    if buf[:4] != NORM_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {NORM_MAGIC!r}", offset=0, path=path)
    if len(buf) < 8:
        raise FormatError("truncated header", offset=len(buf), path=path)
    (c,) = struct.unpack("<I", buf[4:8])
    need = 8 + 16 * c
    if len(buf) != need:
        raise FormatError(f"expected {need} bytes for {c} channels, found {len(buf)}", offset=min(len(buf), need), path=path)
    pairs = np.frombuffer(buf[8:], dtype="<f8").reshape(c, 2)
    return NormStats(pairs[:, 0].copy(), pairs[:, 1].copy(), source)
