import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hyperspec.correlation import (
    DegenerateFitError, InsufficientDataError, correlation_fit, fwhm, noise_stats, rescale_counts, rescale_idler,
    write_stats_csv,
)
from hyperspec.sim import SourceConfig, WindowCounts, simulate_windows

BASE = dict(mean_pairs_per_pulse=1.0, signal_chain_efficiency=0.03, idler_chain_efficiency=0.13)


def W(pairs):
    return [WindowCounts(s, i) for s, i in pairs]


def test_constant_signal_leaves_idler_alone():
    assert rescale_idler(W([(10, 5), (10, 7), (10, 9)])).values.tolist() == [5, 7, 9]


def test_rescale_direct():
    assert rescale_idler(W([(10, 100), (20, 200)])).values.tolist() == [150, 150]


def test_zero_signal_window_excluded():
    r = rescale_idler(W([(0, 4), (10, 100), (30, 300)]))
    assert r.excluded.tolist() == [0] and r.retained.tolist() == [1, 2]
    assert r.values.tolist() == [200, 200]
    with pytest.raises(InsufficientDataError):
        rescale_counts([0, 0], [1, 2])


def test_noise_stats_constant():
    st_ = noise_stats(W([(5, 100)] * 4))
    assert st_.std_raw == 0 and st_.shot_noise_level == 10
    with pytest.raises(InsufficientDataError):
        noise_stats(W([(1, 1)]))


def test_exact_line_fit():
    f = correlation_fit(W([(1, 2), (2, 4), (3, 6)]))
    assert (f.slope, f.intercept, f.pearson_r) == pytest.approx((2, 0, 1))


def test_degenerate_fit():
    with pytest.raises(DegenerateFitError):
        correlation_fit(W([(3, 1), (3, 2), (3, 5)]))
    with pytest.raises(InsufficientDataError):
        correlation_fit(W([(3, 1), (4, 2)]))


def test_fwhm_gaussian():
    x = np.random.default_rng(0).normal(0, 10, 100_000)
    assert fwhm(x) == pytest.approx(2 * math.sqrt(2 * math.log(2)) * 10, rel=0.05)


def test_fwhm_constant_and_small():
    assert fwhm([4.0] * 12) == 0.0
    with pytest.raises(InsufficientDataError):
        fwhm([1, 2, 3])


@pytest.fixture(scope="module")
def noisy():
    return simulate_windows(SourceConfig(**BASE, excess_noise_sigma=0.05), 1.0, 3000.0, 2000, 101)


def test_rescaling_reduces_excess_noise(noisy):
    s = noise_stats(noisy)
    assert s.raw_ratio > 3
    assert s.rescaled_ratio < s.raw_ratio
    raw = np.array([w.n_idler for w in noisy], dtype=float)
    assert fwhm(rescale_idler(noisy).values) < fwhm(raw)


def test_rescaled_floor_matches_error_propagation(noisy):
    # sqrt(1/Ni + 1/Ns) * Ni relative to sqrt(Ni): sqrt(1 + Ni/Ns) = sqrt(1 + 10400/2400)
    floor = math.sqrt(1 + 10_400 / 2_400)
    assert noise_stats(noisy).rescaled_ratio == pytest.approx(floor, rel=0.1)


def test_mean_preserved(noisy):
    raw = np.array([w.n_idler for w in noisy], dtype=float)
    resc = rescale_idler(noisy).values
    se = math.sqrt(raw.var(ddof=1) / raw.size + resc.var(ddof=1) / resc.size)
    assert abs(resc.mean() - raw.mean()) <= 3 * se


def test_both_regimes():
    quiet = noise_stats(simulate_windows(SourceConfig(**BASE), 1.0, 3000.0, 2000, 102))
    assert 0.9 <= quiet.raw_ratio <= 1.1
    assert quiet.rescaled_ratio > quiet.raw_ratio  # added signal shot noise dominates


def test_correlation_regimes():
    assert correlation_fit(simulate_windows(SourceConfig(**BASE, excess_noise_sigma=0.1), 1.0, 3000.0, 2000, 103)).pearson_r > 0.8
    assert abs(correlation_fit(simulate_windows(SourceConfig(**BASE), 1.0, 3000.0, 2000, 104)).pearson_r) < 0.1


@given(st.integers(1, 500), st.integers(0, 500),
       st.lists(st.floats(0.1, 10, allow_nan=False), min_size=2, max_size=30))
def test_gain_cancels_exactly(S, I, gains):
    # integer-valued gain times S keeps the counts exact
    g = [round(x * 8) / 8 for x in gains]
    n_s = np.array(g) * S * 8
    n_i = np.array(g) * I * 8
    vals = rescale_counts(n_s, n_i).values
    assert np.all(vals == vals[0])


@given(st.lists(st.integers(0, 10**6), min_size=2, max_size=50))
def test_shot_noise_squared_is_mean(ni):
    s = noise_stats(W([(1, x) for x in ni]))
    assert s.shot_noise_level ** 2 == pytest.approx(s.mean_idler, rel=1e-12)


def test_stats_csv(tmp_path):
    p = tmp_path / "s.csv"
    write_stats_csv(p, [noise_stats(W([(5, 100), (5, 104)]))])
    assert p.read_text().splitlines()[0] == "wavelength_nm,mean_idler,std_raw,std_rescaled,shot_noise"
