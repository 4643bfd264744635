"""Low-pass filter, mu-law, min-max normalization, segmentation and FSN1 sidecars."""

import warnings
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from fshgr.errors import FormatError, ParameterError
from fshgr.preprocessing import (
    ClampWarning,
    NormStats,
    PreprocessConfig,
    apply_prep,
    butterworth_coefficients,
    butterworth_lowpass,
    fit_prep_stats,
    load_norm_stats,
    minmax_normalize,
    mu_law,
    save_norm_stats,
    segment_windows,
    window_count,
)

# --- Butterworth ------------------------------------------------------------


def test_coefficients_at_1hz_2khz():
    b0, b1, a1 = butterworth_coefficients(2000.0, 1.0)
    assert b0 == b1 == pytest.approx(1.5683e-3, rel=1e-4)
    assert a1 == pytest.approx(-0.99686, abs=1e-5)
    assert abs(a1) < 1


@pytest.mark.parametrize("fs,fc", [(2000.0, 1.0), (2000.0, 50.0), (1000.0, 300.0), (100.0, 7.5)])
def test_coefficients_match_scipy_design(fs, fc):
    b, a = signal.butter(1, fc / (fs / 2))
    b0, b1, a1 = butterworth_coefficients(fs, fc)
    np.testing.assert_allclose([b0, b1], b, rtol=1e-12)
    np.testing.assert_allclose([1.0, a1], a, rtol=1e-12, atol=1e-15)


def test_filter_matches_difference_equation():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((300, 3))
    b0, b1, a1 = butterworth_coefficients(2000.0, 20.0)
    y = np.zeros_like(x)
    prev_x = prev_y = np.zeros(3)
    for t in range(300):
        y[t] = b0 * x[t] + b1 * prev_x - a1 * prev_y
        prev_x, prev_y = x[t], y[t]
    np.testing.assert_allclose(butterworth_lowpass(x, 2000.0, 20.0), y, rtol=1e-10, atol=1e-12)


def test_unity_dc_gain():
    y = butterworth_lowpass(np.full((10000, 2), 3.7), 2000.0, 1.0)
    assert np.all(np.abs(y[-1] - 3.7) < 1e-6)


def test_zero_in_zero_out():
    np.testing.assert_array_equal(butterworth_lowpass(np.zeros((50, 4)), 2000.0, 1.0), 0.0)


def test_channels_filtered_independently():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((200, 3))
    y = butterworth_lowpass(x, 2000.0, 5.0)
    for c in range(3):
        np.testing.assert_allclose(y[:, c], butterworth_lowpass(x[:, c], 2000.0, 5.0), rtol=1e-12)


@pytest.mark.parametrize("fc", [1000.0, 1500.0, 0.0, -1.0])
def test_cutoff_outside_band_rejected(fc):
    with pytest.raises(ParameterError):
        butterworth_coefficients(2000.0, fc)


@settings(max_examples=30, deadline=None)
@given(fc=st.floats(0.01, 999.0), amp=st.floats(0.1, 100.0), seed=st.integers(0, 1000))
def test_filter_stable_and_bounded(fc, amp, seed):
    _, _, a1 = butterworth_coefficients(2000.0, fc)
    assert abs(a1) < 1
    if fc >= 500.0:
        return
    x = np.random.default_rng(seed).uniform(-amp, amp, size=500)
    # below fs/4 the impulse response is non-negative and sums to the unit DC gain
    assert np.max(np.abs(butterworth_lowpass(x, 2000.0, fc))) <= amp * (1 + 1e-9)


# --- mu-law -----------------------------------------------------------------


def test_mu_law_fixed_points():
    assert mu_law(0.0) == 0.0
    assert mu_law(1.0) == pytest.approx(1.0, abs=1e-15)
    assert mu_law(-1.0) == pytest.approx(-1.0, abs=1e-15)


def test_mu_law_half():
    exact = float(Decimal(1025).ln() / Decimal(2049).ln())
    assert mu_law(0.5, 2048) == pytest.approx(exact, rel=1e-14)
    # 0.90915 is a truncated display of 0.9091607...
    assert mu_law(0.5, 2048) == pytest.approx(0.90915, abs=2e-5)


@settings(max_examples=200)
@given(x=st.floats(-1, 1), mu=st.floats(1.0, 1e5))
def test_mu_law_odd(x, mu):
    assert abs(mu_law(-x, mu) + mu_law(x, mu)) < 1e-12


@settings(max_examples=200)
@given(a=st.floats(-1, 1), b=st.floats(-1, 1))
def test_mu_law_monotone(a, b):
    if a == b:
        return
    lo, hi = min(a, b), max(a, b)
    if hi - lo < 1e-12:
        return
    assert mu_law(lo) < mu_law(hi)


def test_mu_law_clamps_and_counts():
    with pytest.warns(ClampWarning, match="2"):
        y = mu_law(np.array([1.5, -2.0, 0.1]))
    np.testing.assert_allclose(y[:2], [1.0, -1.0])
    y, n = mu_law(np.array([1.5, 0.2]), return_clamped=True)
    assert n == 1


# --- min-max -----------------------------------------------------------------


def test_minmax_endpoints_and_midpoint():
    stats = NormStats(np.array([-1.0, 2.0]), np.array([1.0, 6.0]))
    np.testing.assert_allclose(minmax_normalize(np.array([[-1.0, 2.0], [1.0, 6.0], [0.0, 4.0]]), stats),
                               [[0, 0], [1, 1], [0.5, 0.5]])


def test_minmax_clamps_unseen_values():
    stats = NormStats(np.array([0.0]), np.array([1.0]))
    y, n = minmax_normalize(np.array([[-0.5], [0.5], [2.0]]), stats, return_clamped=True)
    np.testing.assert_allclose(y[:, 0], [0.0, 0.5, 1.0])
    assert n == 2


def test_minmax_degenerate_channel():
    stats = NormStats(np.array([0.0, 1.0]), np.array([1.0, 2.0]))
    stats.maxs[1] = stats.mins[1]
    with pytest.warns(ClampWarning, match="degenerate"):
        y = minmax_normalize(np.array([[0.25, 7.0]]), stats)
    np.testing.assert_allclose(y, [[0.25, 0.5]])


# --- segmentation --------------------------------------------------------------


def test_97_windows():
    cfg = PreprocessConfig()
    assert (cfg.window_samples, cfg.step_samples) == (400, 100)
    x = np.zeros((10000, 12))
    assert window_count(10000, 400, 100) == 97
    assert segment_windows(x, 400, 100).shape == (97, 400, 12)


def test_single_window():
    assert segment_windows(np.zeros((400, 2)), 400, 100).shape == (1, 400, 2)


def test_short_signal_gives_empty_with_warning():
    with pytest.warns(UserWarning):
        out = segment_windows(np.zeros((399, 2)), 400, 100)
    assert out.shape == (0, 400, 2)


def test_consecutive_windows_overlap():
    x = np.arange(1000, dtype=float)[:, None]
    w = segment_windows(x, 400, 100)
    np.testing.assert_array_equal(w[0, 100:], w[1, :300])
    np.testing.assert_array_equal(w[3, :, 0], np.arange(300, 700))


@settings(max_examples=200)
@given(T=st.integers(0, 3000), W=st.integers(1, 500), S=st.integers(1, 300))
def test_window_count_formula(T, W, S):
    expected = (T - W) // S + 1 if T >= W else 0
    assert window_count(T, W, S) == expected
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert segment_windows(np.zeros((T, 1)), W, S).shape[0] == expected


def test_window_length_limit():
    with pytest.raises(ParameterError):
        PreprocessConfig(window_ms=301)


@pytest.mark.parametrize("bad", [dict(mu=0), dict(cutoff_hz=1000.0), dict(step_ms=0)])
def test_config_validation(bad):
    with pytest.raises(ParameterError):
        PreprocessConfig(**bad)


# --- pipeline -------------------------------------------------------------------


def _recordings(seed, n=3, T=2000, C=4):
    rng = np.random.default_rng(seed)
    return [np.abs(rng.standard_normal((T, C))) * rng.uniform(0.5, 2.0, C) for _ in range(n)]


def test_pipeline_range_and_determinism():
    cfg = PreprocessConfig()
    filtered = [butterworth_lowpass(x, cfg.fs, cfg.cutoff_hz) for x in _recordings(0)]
    stats = fit_prep_stats(filtered, cfg)
    a, n = apply_prep(filtered[0], stats, cfg)
    b, _ = apply_prep(filtered[0].copy(), stats, cfg)
    assert a.dtype == np.float32 and a.tobytes() == b.tobytes()
    assert n == 0 and a.min() >= 0.0 and a.max() <= 1.0
    # the training extremes land exactly on 0 and 1
    both = np.concatenate([apply_prep(f, stats, cfg)[0] for f in filtered])
    np.testing.assert_allclose(both.min(axis=0), 0.0, atol=1e-6)
    np.testing.assert_allclose(both.max(axis=0), 1.0, atol=1e-6)


def test_pipeline_unseen_split_clamps_and_counts():
    cfg = PreprocessConfig()
    train = [butterworth_lowpass(x, cfg.fs, cfg.cutoff_hz) for x in _recordings(0)]
    stats = fit_prep_stats(train, cfg)
    out, n = apply_prep(train[0] * 3.0, stats, cfg)
    assert n > 0 and out.max() <= 1.0


def test_norm_stats_round_trip(tmp_path):
    stats = NormStats(np.array([-1.5, 0.25, 3.0]), np.array([2.0, 0.5, 3.5]))
    save_norm_stats(tmp_path / "s.fsn", stats)
    raw = (tmp_path / "s.fsn").read_bytes()
    assert raw[:4] == b"FSN1" and int.from_bytes(raw[4:8], "little") == 3 and len(raw) == 8 + 48
    back = load_norm_stats(tmp_path / "s.fsn")
    assert back.mins.tobytes() == stats.mins.tobytes() and back.maxs.tobytes() == stats.maxs.tobytes()


def test_norm_stats_bad_files(tmp_path):
    (tmp_path / "a.fsn").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(FormatError, match="offset 0"):
        load_norm_stats(tmp_path / "a.fsn")
    save_norm_stats(tmp_path / "b.fsn", NormStats(np.zeros(2), np.ones(2)))
    (tmp_path / "b.fsn").write_bytes((tmp_path / "b.fsn").read_bytes()[:-1])
    with pytest.raises(FormatError):
        load_norm_stats(tmp_path / "b.fsn")
