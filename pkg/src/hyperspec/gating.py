"""Trigger-relative arrival histograms and time-gated window counting."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import timetag
from .sim import PS_PER_S, WindowCounts

logger = logging.getLogger(__name__)

DEFAULT_GATE_WIDTH_PS = 150_000
DEFAULT_BIN_WIDTH_PS = 1_000


class GateConfigError(ValueError):
    pass


class NoPhotonsError(ValueError):
    pass


@dataclass(frozen=True)
class ArrivalHistogram:
    bin_width_ps: int
    bins: np.ndarray
    t0_ps: int = 0
    channel: int = timetag.IDLER

    def __post_init__(self):
        if self.bin_width_ps <= 0:
            raise GateConfigError("bin_width_ps must be positive")

    @property
    def bin_starts_ps(self) -> np.ndarray:
        return self.t0_ps + self.bin_width_ps * np.arange(len(self.bins), dtype=np.int64)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_start_ps", "count"])
            for start, count in zip(self.bin_starts_ps, self.bins):
                w.writerow([int(start), int(count)])


@dataclass(frozen=True)
class GateWindow:
    start_ps: int = 0
    width_ps: int = DEFAULT_GATE_WIDTH_PS

    def __post_init__(self):
        if self.width_ps <= 0:
            raise GateConfigError("gate width must be positive")
        if self.start_ps < 0:
            raise GateConfigError("gate start must be >= 0")

    @property
    def stop_ps(self) -> int:
        return self.start_ps + self.width_ps

    def contains(self, relative_ps) -> np.ndarray:
        rel = np.asarray(relative_ps)
        return (rel >= self.start_ps) & (rel < self.stop_ps)

    def check_period(self, pulse_period_ps: int) -> None:
        if self.stop_ps > pulse_period_ps:
            raise GateConfigError(
                f"gate [{self.start_ps}, {self.stop_ps}) ps exceeds pulse period {pulse_period_ps} ps"
            )


def build_histogram(
    cycles: timetag.CycleSet,
    channel: int,
    bin_width_ps: int = DEFAULT_BIN_WIDTH_PS,
    range_ps: tuple[int, int] | None = None,
) -> ArrivalHistogram:
    """Histogram of trigger-relative arrival times for one channel.

    Bin k counts events with ``k*bw <= relative - t0 < (k+1)*bw``; events
    outside `range_ps` are ignored. The range defaults to one pulse period.
    """
    if range_ps is None:
        range_ps = (0, cycles.pulse_period_ps)
    lo, hi = int(range_ps[0]), int(range_ps[1])
    if bin_width_ps <= 0 or hi <= lo:
        raise GateConfigError("need positive bin width and a non-empty range")
    if (hi - lo) % bin_width_ps:
        raise GateConfigError(f"bin width {bin_width_ps} ps does not divide range length {hi - lo} ps")
    rel = cycles.relative_ps[cycles.channel == channel]
    rel = rel[(rel >= lo) & (rel < hi)]
    bins = np.bincount((rel - lo) // bin_width_ps, minlength=(hi - lo) // bin_width_ps)
    return ArrivalHistogram(int(bin_width_ps), bins.astype(np.int64), lo, channel)


def auto_gate(hist: ArrivalHistogram, width_ps: int = DEFAULT_GATE_WIDTH_PS) -> GateWindow:
    """Place a gate of `width_ps` on the densest part of the histogram.

    The earliest window with the largest enclosed count is found first; the
    gate is then re-centred on the count centroid inside that window and
    clamped to the histogram range.
    """
    counts = np.asarray(hist.bins, dtype=np.int64)
    if counts.sum() == 0:
        raise NoPhotonsError(f"channel {hist.channel} histogram is empty")
    n = len(counts)
    w = int(round(width_ps / hist.bin_width_ps))
    if w < 1:
        raise GateConfigError("gate narrower than one bin")
    w = min(w, n)
    csum = np.concatenate([[0], np.cumsum(counts)])
    sums = csum[w:] - csum[:-w]
    best = int(np.argmax(sums))  # argmax returns the first maximum
    inside = counts[best:best + w]
    centroid = best + float(np.dot(np.arange(w), inside)) / inside.sum()
    start = int(np.floor(centroid - (w - 1) / 2 + 0.5))
    start = min(max(start, 0), n - w)
    return GateWindow(hist.t0_ps + start * hist.bin_width_ps, int(width_ps))


@dataclass(frozen=True)
class GatedCounts:
    windows: list[WindowCounts]
    dropped_cycles: int
    dropped_duration_s: float

    def __iter__(self):
        return iter(self.windows)

    def __len__(self):
        return len(self.windows)

    def __getitem__(self, i):
        return self.windows[i]


def gated_counts(
    cycles: timetag.CycleSet,
    gate_s: GateWindow,
    gate_i: GateWindow,
    window_duration_s: float = 2.0,
    *,
    wavelength_nm: float = float("nan"),
    pixel: tuple[int, int] = (-1, -1),
) -> GatedCounts:
    """Per-window counts of signal clicks in `gate_s` and idler clicks in `gate_i`.

    Windows are consecutive spans of `window_duration_s` measured from the
    first trigger. The stream ends one pulse period after the last trigger;
    a trailing window that would extend past that is dropped and reported.
    """
    for g in (gate_s, gate_i):
        g.check_period(cycles.pulse_period_ps)
    if len(cycles) == 0:
        return GatedCounts([], 0, 0.0)
    win_ps = int(round(window_duration_s * PS_PER_S))
    t0 = int(cycles.trigger_ps[0])
    cyc_window = (cycles.trigger_ps - t0) // win_ps
    n_complete = (cycles.end_ps - t0) // win_ps
    ev_window = cyc_window[cycles.cycle_index]
    keep_s = (cycles.channel == timetag.SIGNAL) & gate_s.contains(cycles.relative_ps)
    keep_i = (cycles.channel == timetag.IDLER) & gate_i.contains(cycles.relative_ps)
    n_s = np.bincount(ev_window[keep_s], minlength=n_complete + 1)[:n_complete]
    n_i = np.bincount(ev_window[keep_i], minlength=n_complete + 1)[:n_complete]
    dropped = int((cyc_window >= n_complete).sum())
    dropped_s = (cycles.end_ps - t0 - n_complete * win_ps) / PS_PER_S
    if dropped:
        logger.info("dropped trailing partial window: %d cycles (%.3f s)", dropped, dropped_s)
    windows = [
        WindowCounts(int(a), int(b), window_duration_s, wavelength_nm, pixel) for a, b in zip(n_s, n_i)
    ]
    return GatedCounts(windows, dropped, dropped_s if dropped else 0.0)


def total_counts(cycles: timetag.CycleSet, channel: int, window_duration_s: float = 2.0) -> np.ndarray:
    """Ungated per-window counts, same partition as `gated_counts`."""
    everything = GateWindow(0, cycles.pulse_period_ps)
    res = gated_counts(cycles, everything, everything, window_duration_s)
    key = "n_signal" if channel == timetag.SIGNAL else "n_idler"
    return np.array([getattr(w, key) for w in res.windows], dtype=np.int64)
