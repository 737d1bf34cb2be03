import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hyperspec import timetag as tt
from hyperspec.sim import SourceConfig, simulate_stream


def test_empty_stream_is_header_only():
    blob = tt.encode_stream(tt.StreamHeader(), [])
    assert len(blob) == tt.HEADER_SIZE == 32
    hdr, recs = tt.decode_stream(blob)
    assert hdr.record_count == 0 and len(recs) == 0


def test_single_record_layout():
    blob = tt.encode_stream(tt.StreamHeader(), [(1, 1000)])
    assert len(blob) == 48
    magic, version, _, res, period, count = struct.unpack_from("<4sHHQQQ", blob)
    assert (magic, version, res, period, count) == (b"TTG1", 1, 1, 25_000_000, 1)
    channel, flags, _, t = struct.unpack_from("<HHIQ", blob, 32)
    assert (channel, flags, t) == (1, 0, 1000)
    _, recs = tt.decode_stream(blob)
    assert tt.to_records(recs) == [tt.TimeTagRecord(1, 1000)]


def test_unsorted_reports_index():
    with pytest.raises(tt.UnsortedStreamError) as err:
        tt.encode_stream(tt.StreamHeader(), [(1, 5), (1, 3)])
    assert err.value.index == 1


def test_bad_channel_rejected():
    with pytest.raises(tt.StreamFormatError):
        tt.encode_stream(tt.StreamHeader(), [(7, 5)])


def test_bad_magic():
    with pytest.raises(tt.StreamFormatError, match="magic"):
        tt.decode_stream(b"XXXX" + bytes(60))


def test_truncated_record_reports_offset():
    blob = tt.encode_stream(tt.StreamHeader(), [(0, 0), (1, 10)])
    with pytest.raises(tt.StreamLengthError) as err:
        tt.decode_stream(blob[:-16])
    assert err.value.offset == 48


def test_truncated_header():
    with pytest.raises(tt.StreamLengthError):
        tt.decode_header(b"TTG1" + bytes(10))


def test_file_round_trip_and_chunks(tmp_path):
    recs = tt.make_records([0, 1, 2, 0, 2], [0, 100, 200, 25_000_000, 25_000_010])
    p = tmp_path / "x.ttg"
    tt.write_stream(p, tt.StreamHeader(), recs)
    _, back = tt.read_stream(p)
    assert np.array_equal(back, recs)
    chunks = list(tt.iter_chunks(p.read_bytes(), chunk_records=2))
    assert [len(c) for c in chunks] == [2, 2, 1]
    assert np.array_equal(np.concatenate(chunks), recs)


records = st.lists(
    st.tuples(st.sampled_from(tt.VALID_CHANNELS), st.integers(0, 2**63 - 1)), max_size=60
).map(lambda rs: sorted(rs, key=lambda r: r[1]))


@given(records, st.integers(1, 10**6), st.integers(1, 10**9))
def test_round_trip_property(rs, res, period):
    hdr = tt.StreamHeader(resolution_ps=res, pulse_period_ps=period, record_count=len(rs))
    h2, back = tt.decode_stream(tt.encode_stream(hdr, rs))
    assert h2 == hdr
    assert tt.to_records(back) == [tt.TimeTagRecord(*r) for r in rs]


def test_split_examples():
    cs = tt.split_by_trigger([(0, 0), (1, 100), (0, 25_000_000), (2, 25_000_050)])
    assert len(cs) == 2
    assert list(cs[0].relative_ps) == [100] and list(cs[1].relative_ps) == [50]
    assert [c.channels.tolist() for c in cs] == [[1], [2]]


def test_split_discards_before_first_trigger():
    cs = tt.split_by_trigger([(1, 50), (0, 100), (2, 150)])
    assert cs.discarded_count == 1
    assert cs[0].events == [tt.TimeTagRecord(2, 50)]


def test_dead_trigger():
    with pytest.raises(tt.DeadTriggerError):
        tt.split_by_trigger([(1, 5), (2, 6)])


def test_two_second_stream_has_80000_cycles():
    cfg = SourceConfig(mean_pairs_per_pulse=0.1)
    hdr, recs = tt.decode_stream(simulate_stream(cfg, 1.0, 3000.0, 2.0, 0))
    assert len(tt.split_by_trigger(recs, hdr.pulse_period_ps)) == 80_000


events = st.lists(st.tuples(st.sampled_from(tt.VALID_CHANNELS), st.integers(0, 10**7)), max_size=80)


@given(events)
def test_cycle_partition(evs):
    evs = sorted(evs, key=lambda e: e[1])
    n_det = sum(1 for c, _ in evs if c != tt.TRIGGER)
    if not any(c == tt.TRIGGER for c, _ in evs):
        with pytest.raises(tt.DeadTriggerError):
            tt.split_by_trigger(evs)
        return
    cs = tt.split_by_trigger(evs)
    assert cs.discarded_count + sum(len(c.relative_ps) for c in cs) == n_det
    assert all((c.relative_ps >= 0).all() for c in cs)


@given(st.integers(1, 30), st.lists(st.integers(0, 24_999), max_size=40), st.data())
def test_relative_below_period_for_periodic_triggers(n, offsets, data):
    period = 25_000
    trig = [(0, k * period) for k in range(n)]
    dets = [(1, data.draw(st.integers(0, n - 1)) * period + o) for o in offsets]
    cs = tt.split_by_trigger(sorted(trig + dets, key=lambda r: (r[1], r[0])))
    assert (cs.relative_ps < period).all()
