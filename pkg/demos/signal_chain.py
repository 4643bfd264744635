"""
From raw sEMG to model-ready windows
====================================

Walks one synthetic recording through the preprocessing chain: a
first-order low-pass filter, max-abs scaling, mu-law companding, min-max
normalization and overlapping 200 ms windows.

    python demos/signal_chain.py
"""

import numpy as np

from fshgr.data import SynthSpec, synthesize
from fshgr.preprocessing import (
    PreprocessConfig,
    apply_prep,
    butterworth_coefficients,
    butterworth_lowpass,
    fit_prep_stats,
    mu_law,
    segment_windows,
)

cfg = PreprocessConfig()
spec = SynthSpec(n_subjects=2, n_gestures=3, duration_s=2.0)
recordings = list(synthesize(spec, seed=0))
rec = recordings[0]
print(f"recording subject={rec.subject_id} gesture={rec.gesture_id} rep={rec.repetition_id}: "
      f"{rec.samples.shape[0]} samples x {rec.samples.shape[1]} channels at {rec.fs:.0f} Hz")

# The filter is a single pole; at 1 Hz and 2 kHz it keeps only the slow envelope.
b0, b1, a1 = butterworth_coefficients(cfg.fs, cfg.cutoff_hz)
print(f"low-pass coefficients b0=b1={b0:.3e}, a1={a1:.6f}, DC gain={(b0 + b1) / (1 + a1):.9f}")
filtered = butterworth_lowpass(rec.samples, cfg.fs, cfg.cutoff_hz)
print(f"raw std per channel      {np.round(rec.samples.std(axis=0)[:4], 3)} ...")
print(f"filtered std per channel {np.round(filtered.std(axis=0)[:4], 3)} ...")

# Mu-law stretches small amplitudes; a value at 1% of full scale maps to about 0.40.
for v in (0.001, 0.01, 0.1, 0.5):
    print(f"mu_law({v}) = {mu_law(v):.4f}")

# Normalization statistics come from training recordings only.
train = [butterworth_lowpass(r.samples, cfg.fs, cfg.cutoff_hz) for r in recordings if r.subject_id == 1]
stats = fit_prep_stats(train, cfg)
normalized, clamped = apply_prep(filtered, stats, cfg)
print(f"normalized range [{normalized.min():.3f}, {normalized.max():.3f}], {clamped} value(s) clamped")

windows = segment_windows(normalized, cfg.window_samples, cfg.step_samples)
print(f"{windows.shape[0]} windows of {cfg.window_samples} samples, step {cfg.step_samples}: shape {windows.shape}")
