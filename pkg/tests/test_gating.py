import numpy as np
import pytest
from hypothesis import given, strategies as st

from hyperspec import timetag as tt
from hyperspec.gating import (
    ArrivalHistogram, GateConfigError, GateWindow, NoPhotonsError, auto_gate, build_histogram, gated_counts,
    total_counts,
)
from hyperspec.sim import SourceConfig, simulate_stream

PERIOD = 25_000_000


def _cycles(rel_by_cycle, channel=tt.SIGNAL, period=PERIOD):
    return tt.cycles_from_list(
        [tt.PulseCycle(k * period, np.full(len(r), channel), np.asarray(r, dtype=np.int64))
         for k, r in enumerate(rel_by_cycle)],
        period,
    )


def test_histogram_direct_binning():
    h = build_histogram(_cycles([[100, 150, 2100]]), tt.SIGNAL, 1000, (0, 3000))
    assert h.bins.tolist() == [2, 0, 1]


def test_histogram_empty():
    h = build_histogram(_cycles([[]]), tt.SIGNAL, 1000, (0, 3000))
    assert h.bins.tolist() == [0, 0, 0]


def test_histogram_range_must_divide():
    with pytest.raises(GateConfigError):
        build_histogram(_cycles([[1]]), tt.SIGNAL, 1000, (0, 2500))


def test_histogram_csv(tmp_path):
    h = ArrivalHistogram(1000, np.array([3, 1]), 0, tt.SIGNAL)
    h.to_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines() == ["bin_start_ps,count", "0,3", "1000,1"]


def test_auto_gate_centres_spike():
    bins = np.zeros(100, dtype=np.int64)
    bins[40] = 7
    g = auto_gate(ArrivalHistogram(1000, bins, 0, tt.SIGNAL), 10_000)
    assert (g.start_ps // 1000, g.stop_ps // 1000 - 1) == (36, 45)


def test_auto_gate_uniform_starts_at_zero():
    g = auto_gate(ArrivalHistogram(1000, np.ones(100, dtype=np.int64), 0, tt.SIGNAL), 10_000)
    assert g.start_ps == 0


def test_auto_gate_empty():
    with pytest.raises(NoPhotonsError):
        auto_gate(ArrivalHistogram(1000, np.zeros(10, dtype=np.int64), 0, tt.IDLER), 3000)


@pytest.fixture(scope="module")
def pulsed():
    cfg = SourceConfig(mean_pairs_per_pulse=0.5, arrival_offset_ns=50.0, jitter_sigma_ns=3.0)
    hdr, recs = tt.decode_stream(simulate_stream(cfg, 1.0, 3000.0, 0.5, 7))
    return tt.split_by_trigger(recs, hdr.pulse_period_ps)


def test_histogram_peak_at_offset(pulsed):
    h = build_histogram(pulsed, tt.IDLER, 1000)
    assert abs(int(np.argmax(h.bins)) - 50) <= 2


def test_auto_gate_keeps_correlated_events(pulsed):
    for ch in (tt.SIGNAL, tt.IDLER):
        g = auto_gate(build_histogram(pulsed, ch, 1000), 150_000)
        rel = pulsed.relative_ps[pulsed.channel == ch]
        assert g.contains(rel).mean() >= 0.99


def test_gate_single_cycle():
    cs = _cycles([[10_000, 200_000]])
    g = GateWindow(0, 150_000)
    w = gated_counts(cs, g, g, window_duration_s=PERIOD / 1e12)
    assert len(w) == 1 and w[0].n_signal == 1 and w[0].n_idler == 0


def test_partial_window_dropped():
    period = 25_000_000_000  # 40 Hz keeps the cycle count small
    cs = _cycles([[] for _ in range(180)], period=period)  # 4.5 s
    res = gated_counts(cs, GateWindow(0, 150_000), GateWindow(0, 150_000), 2.0)
    assert len(res) == 2
    assert res.dropped_cycles == 20
    assert res.dropped_duration_s == pytest.approx(0.5)


def test_gate_outside_period_rejected():
    with pytest.raises(GateConfigError):
        gated_counts(_cycles([[1]], period=100_000), GateWindow(0, 150_000), GateWindow(0, 150_000), 1.0)


def test_gated_darks_oracle():
    # 1000 Hz * 2 s * 150 ns / 25 us = 12 per window
    cfg = SourceConfig(mean_pairs_per_pulse=0.0, dark_rate_idler_hz=1000.0)
    n = 30
    hdr, recs = tt.decode_stream(simulate_stream(cfg, 1.0, 3000.0, 2.0 * n, 3))
    cs = tt.split_by_trigger(recs, hdr.pulse_period_ps)
    g = GateWindow(0, 150_000)
    ni = np.array([w.n_idler for w in gated_counts(cs, g, g, 2.0)], dtype=float)
    assert ni.size == n
    assert abs(ni.mean() - 12.0) < 3 * np.sqrt(12.0 / n)
    totals = total_counts(cs, tt.IDLER, 2.0)
    assert (ni <= totals).all()


@given(
    st.lists(st.lists(st.integers(0, 999_999), max_size=8), min_size=1, max_size=20),
    st.integers(0, 500_000), st.integers(1, 500_000), st.integers(0, 200_000), st.integers(0, 200_000),
)
def test_shrinking_gate_never_increases(rel, start, width, cut_lo, cut_hi):
    cs = _cycles(rel, period=1_000_000)
    outer = GateWindow(start, width)
    lo = min(start + cut_lo, start + width - 1)
    inner = GateWindow(lo, max(1, start + width - cut_hi - lo))
    dur = 1_000_000 * len(rel) / 1e12
    big = gated_counts(cs, outer, outer, dur)[0].n_signal
    small = gated_counts(cs, inner, inner, dur)[0].n_signal
    assert small <= big <= sum(len(r) for r in rel)
