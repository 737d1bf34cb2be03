"""Binary time-tag streams (.ttg): encoding, decoding and trigger segmentation.

Layout, all little-endian::

    header (32 B): magic "TTG1" | version u16 | reserved u16 |
                   resolution_ps u64 | pulse_period_ps u64 | record_count u64
    record (16 B): channel u16 | flags u16 | reserved u32 | timestamp_ps u64

Channel 0 carries the laser trigger, 1 the upconverted signal SPAD and 2 the
upconverted idler SPAD.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

MAGIC = b"TTG1"
FORMAT_VERSION = 1
HEADER_SIZE = 32
RECORD_SIZE = 16

TRIGGER, SIGNAL, IDLER = 0, 1, 2
VALID_CHANNELS = (TRIGGER, SIGNAL, IDLER)

DEFAULT_PULSE_PERIOD_PS = 25_000_000  # 40 kHz

_HEADER = struct.Struct("<4sHHQQQ")

RECORD_DTYPE = np.dtype(
    [("channel", "<u2"), ("flags", "<u2"), ("reserved", "<u4"), ("timestamp_ps", "<u8")]
)
assert RECORD_DTYPE.itemsize == RECORD_SIZE


class StreamFormatError(ValueError):
    """Raised for bad magic, unsorted input or invalid channels."""


class UnsortedStreamError(StreamFormatError):
    def __init__(self, index: int):
        super().__init__(f"timestamps not sorted at index {index}")
        self.index = index


class StreamLengthError(StreamFormatError):
    """Raised when the byte stream is shorter than the header promises."""

    def __init__(self, message: str, offset: int):
        super().__init__(message)
        self.offset = offset


class DeadTriggerError(ValueError):
    """Raised when a stream holds no trigger events at all."""


class TimeTagRecord(NamedTuple):
    channel: int
    timestamp_ps: int


@dataclass(frozen=True)
class StreamHeader:
    resolution_ps: int = 1
    pulse_period_ps: int = DEFAULT_PULSE_PERIOD_PS
    record_count: int = 0
    version: int = FORMAT_VERSION
    magic: bytes = MAGIC

    def __post_init__(self):
        if self.magic != MAGIC:
            raise StreamFormatError(f"bad magic {self.magic!r}, expected {MAGIC!r}")
        if self.pulse_period_ps <= 0:
            raise StreamFormatError("pulse_period_ps must be positive")
        if self.resolution_ps <= 0:
            raise StreamFormatError("resolution_ps must be positive")

    def pack(self) -> bytes:
        return _HEADER.pack(
            self.magic, self.version, 0, self.resolution_ps, self.pulse_period_ps, self.record_count
        )


def as_record_array(records) -> np.ndarray:
    """Coerce a record array, a sequence of TimeTagRecord or of (channel, t) pairs."""
    if isinstance(records, np.ndarray) and records.dtype == RECORD_DTYPE:
        return records
    if isinstance(records, np.ndarray) and records.dtype.names:
        out = np.zeros(len(records), dtype=RECORD_DTYPE)
        for name in records.dtype.names:
            if name in RECORD_DTYPE.names:
                out[name] = records[name]
        return out
    out = np.zeros(len(records), dtype=RECORD_DTYPE)
    if len(records):
        pairs = np.asarray([(int(r[0]), int(r[1])) for r in records], dtype=np.int64)
        if (pairs < 0).any():
            raise StreamFormatError("negative channel or timestamp")
        out["channel"] = pairs[:, 0]
        out["timestamp_ps"] = pairs[:, 1]
    return out


def make_records(channels, timestamps_ps) -> np.ndarray:
    channels = np.asarray(channels)
    timestamps_ps = np.asarray(timestamps_ps)
    if channels.shape != timestamps_ps.shape:
        raise ValueError("channels and timestamps must have the same length")
    out = np.zeros(channels.size, dtype=RECORD_DTYPE)
    out["channel"] = channels
    out["timestamp_ps"] = timestamps_ps
    return out


def to_records(array: np.ndarray) -> list[TimeTagRecord]:
    return [TimeTagRecord(int(c), int(t)) for c, t in zip(array["channel"], array["timestamp_ps"])]


def _validate(arr: np.ndarray) -> None:
    bad = ~np.isin(arr["channel"], VALID_CHANNELS)
    if bad.any():
        i = int(np.argmax(bad))
        raise StreamFormatError(f"invalid channel {int(arr['channel'][i])} at index {i}")
    ts = arr["timestamp_ps"]
    if ts.size > 1:
        # compare as unsigned; np.diff would wrap
        unsorted = ts[1:] < ts[:-1]
        if unsorted.any():
            raise UnsortedStreamError(int(np.argmax(unsorted)) + 1)


def encode_stream(header: StreamHeader, records) -> bytes:
    """Serialize records after `header`; the header's record_count is rewritten."""
    arr = as_record_array(records)
    _validate(arr)
    hdr = StreamHeader(
        resolution_ps=header.resolution_ps,
        pulse_period_ps=header.pulse_period_ps,
        record_count=len(arr),
        version=header.version,
    )
    return hdr.pack() + arr.astype(RECORD_DTYPE, copy=False).tobytes()


def decode_header(data: bytes) -> StreamHeader:
    if bytes(data[:4]) != MAGIC:
        raise StreamFormatError(f"bad magic {bytes(data[:4])!r}")
    if len(data) < HEADER_SIZE:
        raise StreamLengthError(f"truncated header: {len(data)} of {HEADER_SIZE} bytes", len(data))
    magic, version, _, resolution, period, count = _HEADER.unpack_from(data, 0)
    return StreamHeader(
        resolution_ps=resolution, pulse_period_ps=period, record_count=count, version=version
    )


def decode_stream(data: bytes) -> tuple[StreamHeader, np.ndarray]:
    """Parse a .ttg byte string into its header and a RECORD_DTYPE array."""
    header = decode_header(data)
    need = HEADER_SIZE + header.record_count * RECORD_SIZE
    if len(data) < need:
        have = (len(data) - HEADER_SIZE) // RECORD_SIZE
        offset = HEADER_SIZE + have * RECORD_SIZE
        raise StreamLengthError(
            f"stream truncated: header claims {header.record_count} records, "
            f"record {have} incomplete at byte offset {offset}",
            offset,
        )
    records = np.frombuffer(data, dtype=RECORD_DTYPE, count=header.record_count, offset=HEADER_SIZE)
    return header, records


def iter_chunks(data: bytes, chunk_records: int = 1 << 20) -> Iterator[np.ndarray]:
    """Yield record blocks without materialising the whole stream."""
    header = decode_header(data)
    total = header.record_count
    if len(data) < HEADER_SIZE + total * RECORD_SIZE:
        decode_stream(data)  # raises with the offset
    for start in range(0, total, chunk_records):
        n = min(chunk_records, total - start)
        yield np.frombuffer(data, dtype=RECORD_DTYPE, count=n, offset=HEADER_SIZE + start * RECORD_SIZE)


def write_stream(path, header: StreamHeader, records) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_stream(header, records))


def read_stream(path) -> tuple[StreamHeader, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_stream(fh.read())


@dataclass(frozen=True)
class PulseCycle:
    trigger_ps: int
    channels: np.ndarray
    relative_ps: np.ndarray

    @property
    def events(self) -> list[TimeTagRecord]:
        return [TimeTagRecord(int(c), int(r)) for c, r in zip(self.channels, self.relative_ps)]


@dataclass(frozen=True)
class CycleSet:
    """All trigger cycles of one stream, stored column-wise.

    ``cycle_index[k]`` is the cycle owning event ``k``; events are kept in
    stream order so each cycle's events form one contiguous run.
    """

    trigger_ps: np.ndarray
    cycle_index: np.ndarray
    channel: np.ndarray
    relative_ps: np.ndarray
    pulse_period_ps: int
    discarded_count: int = 0

    def __len__(self) -> int:
        return len(self.trigger_ps)

    @property
    def n_events(self) -> int:
        return len(self.cycle_index)

    def _bounds(self) -> np.ndarray:
        return np.searchsorted(self.cycle_index, np.arange(len(self) + 1))

    def __getitem__(self, i: int) -> PulseCycle:
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        lo, hi = np.searchsorted(self.cycle_index, [i, i + 1])
        return PulseCycle(int(self.trigger_ps[i]), self.channel[lo:hi], self.relative_ps[lo:hi])

    def __iter__(self) -> Iterator[PulseCycle]:
        bounds = self._bounds()
        for i in range(len(self)):
            lo, hi = bounds[i], bounds[i + 1]
            yield PulseCycle(int(self.trigger_ps[i]), self.channel[lo:hi], self.relative_ps[lo:hi])

    @property
    def end_ps(self) -> int:
        """Nominal end of the last cycle."""
        return int(self.trigger_ps[-1]) + self.pulse_period_ps


def split_by_trigger(records, pulse_period_ps: int | None = None) -> CycleSet:
    """Assign every detection to the most recent preceding trigger.

    Detections before the first trigger are dropped and counted in
    ``discarded_count``. `pulse_period_ps` defaults to the median trigger
    spacing.
    """
    arr = as_record_array(records)
    ch = arr["channel"]
    ts = arr["timestamp_ps"].astype(np.int64)
    is_trig = ch == TRIGGER
    triggers = ts[is_trig]
    if triggers.size == 0:
        raise DeadTriggerError("no trigger events (channel 0) in stream")
    if pulse_period_ps is None:
        if triggers.size > 1:
            pulse_period_ps = int(np.median(np.diff(triggers)))
        else:
            pulse_period_ps = DEFAULT_PULSE_PERIOD_PS
    # number of triggers at or before each record, in file order
    owner = np.cumsum(is_trig) - 1
    det = ~is_trig
    owner_det = owner[det]
    keep = owner_det >= 0
    discarded = int((~keep).sum())
    idx = owner_det[keep]
    rel = ts[det][keep] - triggers[idx]
    return CycleSet(
        trigger_ps=triggers,
        cycle_index=idx,
        channel=ch[det][keep].astype(np.int64),
        relative_ps=rel,
        pulse_period_ps=int(pulse_period_ps),
        discarded_count=discarded,
    )


def cycles_from_list(cycles: Sequence[PulseCycle], pulse_period_ps: int = DEFAULT_PULSE_PERIOD_PS) -> CycleSet:
    """Build a CycleSet from explicit PulseCycle objects (mainly for small inputs)."""
    trig = np.array([c.trigger_ps for c in cycles], dtype=np.int64)
    idx = np.concatenate([np.full(len(c.relative_ps), i, dtype=np.int64) for i, c in enumerate(cycles)] or [np.zeros(0, np.int64)])
    ch = np.concatenate([np.asarray(c.channels, dtype=np.int64) for c in cycles] or [np.zeros(0, np.int64)])
    rel = np.concatenate([np.asarray(c.relative_ps, dtype=np.int64) for c in cycles] or [np.zeros(0, np.int64)])
    return CycleSet(trig, idx, ch, rel, int(pulse_period_ps))
