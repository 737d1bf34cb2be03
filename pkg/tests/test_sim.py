import numpy as np
import pytest
from scipy import stats

from hyperspec import timetag as tt
from hyperspec.gating import GateWindow, gated_counts
from hyperspec.hypercube import PIXEL, POST_REF, PRE_REF, ScanPlan
from hyperspec.sim import (
    ConfigError, Phantom, SourceConfig, simulate_scan, simulate_stream, simulate_window, simulate_windows, substream,
)

BASE = dict(mean_pairs_per_pulse=1.0, signal_chain_efficiency=0.03, idler_chain_efficiency=0.13)


def _idler(ws):
    return np.array([w.n_idler for w in ws], dtype=float)


def test_no_photons():
    cfg = SourceConfig(mean_pairs_per_pulse=0.0)
    w = simulate_window(cfg, 1.0, 3000.0, 1)
    assert (w.n_signal, w.n_idler) == (0, 0)


def test_mean_idler_is_10400():
    # 40 000 pulses/s * 2 s * 1 pair * 0.13
    ni = _idler(simulate_windows(SourceConfig(**BASE), 1.0, 3000.0, 1000, 11))
    se = ni.std(ddof=1) / np.sqrt(ni.size)
    assert abs(ni.mean() - 10_400) < 3 * se


def test_excess_noise_variance_ratio():
    # law of total variance: 1 + sigma^2 * mean = 1 + 0.0025 * 10400 = 27
    ni = _idler(simulate_windows(SourceConfig(**BASE, excess_noise_sigma=0.05), 1.0, 3000.0, 2000, 12))
    expected = 1 + 0.05**2 * 10_400
    assert abs(ni.var(ddof=1) / ni.mean() - expected) < 0.25 * expected


def test_fano_factor_is_poisson():
    ni = _idler(simulate_windows(SourceConfig(**BASE), 1.0, 3000.0, 2000, 13))
    assert 0.9 <= ni.var(ddof=1) / ni.mean() <= 1.1


def test_correlation_grows_with_gain_noise():
    rs = []
    for sigma in (0.0, 0.02, 0.1):
        ws = simulate_windows(SourceConfig(**BASE, excess_noise_sigma=sigma), 1.0, 3000.0, 1000, 14)
        rs.append(np.corrcoef([w.n_signal for w in ws], _idler(ws))[0, 1])
    assert 0 < rs[1] < rs[2] and rs[0] < rs[1]


def test_window_determinism():
    cfg = SourceConfig(**BASE, excess_noise_sigma=0.05)
    assert simulate_windows(cfg, 0.5, 3100.0, 20, 3) == simulate_windows(cfg, 0.5, 3100.0, 20, 3)
    assert simulate_windows(cfg, 0.5, 3100.0, 20, 3) != simulate_windows(cfg, 0.5, 3100.0, 20, 4)


def test_substreams_independent_of_order():
    a = substream(5, 2, 7).random(4)
    substream(5, 1).random(100)
    assert np.array_equal(a, substream(5, 2, 7).random(4))


def test_config_validation():
    with pytest.raises(ConfigError):
        SourceConfig(idler_chain_efficiency=1.5)
    with pytest.raises(ConfigError):
        SourceConfig.from_mapping({"bogus": 1})
    with pytest.raises(ConfigError):
        SourceConfig(conversion_profile=((3000, 0.5), (2900, 0.4)))
    with pytest.raises(ValueError):
        simulate_window(SourceConfig(), 1.5, 3000.0, 0)


def test_conversion_profile_scales_counts():
    cfg = SourceConfig(**BASE, conversion_profile=((2900, 0.5), (3600, 0.5)))
    ni = _idler(simulate_windows(cfg, 1.0, 3000.0, 300, 15))
    assert abs(ni.mean() / 5200 - 1) < 0.01
    with pytest.raises(ConfigError):
        cfg.profile(3700.0)


def test_stream_trigger_count():
    hdr, recs = tt.decode_stream(simulate_stream(SourceConfig(), 1.0, 3000.0, 0.001, 0))
    assert int((recs["channel"] == tt.TRIGGER).sum()) == 40
    assert hdr.pulse_period_ps == 25_000_000


def test_stream_darks_uniform():
    cfg = SourceConfig(mean_pairs_per_pulse=0.0, dark_rate_idler_hz=1000.0)
    hdr, recs = tt.decode_stream(simulate_stream(cfg, 1.0, 3000.0, 1.0, 21))
    cs = tt.split_by_trigger(recs, hdr.pulse_period_ps)
    rel = cs.relative_ps[cs.channel == tt.IDLER] / hdr.pulse_period_ps
    assert rel.size > 800
    res = stats.kstest(rel, "uniform")
    assert res.statistic < 1.63 / np.sqrt(rel.size)  # 1% critical value


def test_stream_matches_window_model():
    cfg = SourceConfig(mean_pairs_per_pulse=0.05, excess_noise_sigma=0.05)
    n, dur = 100, 0.05
    hdr, recs = tt.decode_stream(simulate_stream(cfg, 1.0, 3000.0, n * dur, 31, window_duration_s=dur))
    cs = tt.split_by_trigger(recs, hdr.pulse_period_ps)
    gate = GateWindow(0, 150_000)
    from_stream = _idler(gated_counts(cs, gate, gate, dur))
    direct = _idler(simulate_windows(cfg, 1.0, 3000.0, n, 32, duration_s=dur))
    assert from_stream.size == n
    se = np.sqrt(from_stream.var(ddof=1) / n + direct.var(ddof=1) / n)
    assert abs(from_stream.mean() - direct.mean()) < 3 * se


def test_correlated_arrivals_near_offset():
    cfg = SourceConfig(mean_pairs_per_pulse=0.2)
    hdr, recs = tt.decode_stream(simulate_stream(cfg, 1.0, 3000.0, 1.0, 41))
    cs = tt.split_by_trigger(recs, hdr.pulse_period_ps)
    rel = cs.relative_ps[cs.channel == tt.SIGNAL]
    assert abs(np.median(rel) - 50_000) < 1_000
    assert abs(rel.std() - 3_000) < 500


def _small_plan(**kw):
    base = dict(x_extent_um=75, y_extent_um=75, step_um=25, wavelengths_nm=(3000.0, 3100.0), dwell_s=2.0)
    base.update(kw)
    return ScanPlan(**base)


def test_scan_flat_field():
    plan = _small_plan()
    raw = simulate_scan(SourceConfig(**BASE), Phantom(lambda *a: 1.0), plan, 0.0, 1)
    r = raw.rows
    pix = r["n_idler"][r["kind"] == PIXEL].astype(float)
    ref = r["n_idler"][r["kind"] != PIXEL].astype(float)
    assert abs(pix.mean() - ref.mean()) < 3 * np.sqrt(10_400 / pix.size + 10_400 / ref.size)


def test_scan_two_regions_ratio():
    plan = _small_plan()
    phantom = Phantom(lambda ix, iy, wl: 1.0 if ix < 2 else 0.5)
    r = simulate_scan(SourceConfig(**BASE), phantom, plan, 0.0, 2).rows
    pix = r[r["kind"] == PIXEL]
    left = pix["n_idler"][pix["ix"] < 2].mean()
    right = pix["n_idler"][pix["ix"] >= 2].mean()
    assert abs(right / left - 0.5) < 0.05 * 0.5


def test_scan_drift_in_references():
    plan = _small_plan(reference_points_per_plane=20, wavelengths_nm=(3000.0,))
    r = simulate_scan(SourceConfig(**BASE), Phantom(lambda *a: 1.0), plan, 0.01, 3).rows
    pre, post = r[r["kind"] == PRE_REF], r[r["kind"] == POST_REF]
    t_pre = (pre["t_start_s"] + 1).mean()
    t_post = (post["t_start_s"] + 1).mean()
    expected = (1 + 0.01 * t_post) / (1 + 0.01 * t_pre)
    got = post["n_idler"].mean() / pre["n_idler"].mean()
    sampling = np.sqrt(2 / (20 * 10_400))
    assert abs(got / expected - 1) < 4 * sampling


def test_scan_missing_point_names_it():
    plan = _small_plan()
    with pytest.raises(KeyError, match=r"\(0, 0\) at 3000"):
        simulate_scan(SourceConfig(), Phantom({}), plan, 0.0, 1)


def test_scan_parallel_identical():
    plan = _small_plan()
    ph = Phantom(lambda ix, iy, wl: 0.3 + 0.1 * ix)
    a = simulate_scan(SourceConfig(**BASE, excess_noise_sigma=0.05), ph, plan, 0.002, 9, workers=1)
    b = simulate_scan(SourceConfig(**BASE, excess_noise_sigma=0.05), ph, plan, 0.002, 9, workers=2)
    assert a.rows.tobytes() == b.rows.tobytes()


@pytest.mark.parametrize("field,low,high", [("T", 0.4, 0.8), ("mean_pairs_per_pulse", 0.5, 1.0), ("idler_chain_efficiency", 0.06, 0.13)])
def test_expected_idler_monotone(field, low, high):
    def mean(v):
        kw = dict(BASE)
        T = 1.0
        if field == "T":
            T = v
        else:
            kw[field] = v
        return _idler(simulate_windows(SourceConfig(**kw), T, 3000.0, 200, 51)).mean()
    assert mean(high) > mean(low)
