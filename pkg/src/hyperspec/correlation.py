"""Signal-referenced rescaling of idler counts and the noise statistics around it.

The rescaled idler count of window w is ``n_idler[w] * mean(n_signal) / n_signal[w]``.
A gain common to both arms cancels in that ratio, at the price of adding the
signal arm's shot noise.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .sim import WindowCounts


class InsufficientDataError(ValueError):
    pass


class DegenerateFitError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseStats:
    mean_idler: float
    std_raw: float
    std_rescaled: float
    shot_noise_level: float
    wavelength_nm: float = float("nan")

    @property
    def raw_ratio(self) -> float:
        return self.std_raw / self.shot_noise_level

    @property
    def rescaled_ratio(self) -> float:
        return self.std_rescaled / self.shot_noise_level


@dataclass(frozen=True)
class CorrelationFit:
    slope: float
    intercept: float
    pearson_r: float


@dataclass(frozen=True)
class Rescaled:
    values: np.ndarray
    retained: np.ndarray
    excluded: np.ndarray

    def __len__(self):
        return len(self.values)


def count_arrays(windows: Sequence[WindowCounts]) -> tuple[np.ndarray, np.ndarray]:
    n_s = np.fromiter((w.n_signal for w in windows), dtype=np.float64, count=len(windows))
    n_i = np.fromiter((w.n_idler for w in windows), dtype=np.float64, count=len(windows))
    return n_s, n_i


def rescale_counts(n_signal, n_idler) -> Rescaled:
    """Array form of `rescale_idler`. Windows with no signal clicks are excluded."""
    n_s = np.asarray(n_signal, dtype=np.float64)
    n_i = np.asarray(n_idler, dtype=np.float64)
    ok = n_s > 0
    retained = np.flatnonzero(ok)
    if retained.size == 0:
        raise InsufficientDataError("every window has zero signal counts")
    mean_s = n_s[ok].mean()
    # ratio first: a common gain then cancels exactly in floating point
    return Rescaled(n_i[ok] / n_s[ok] * mean_s, retained, np.flatnonzero(~ok))


def rescale_batches(n_signal, n_idler) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise `rescale_counts` over (batches, windows) arrays.

    Returns the mean rescaled idler count per batch and a validity flag
    (False where no window of the batch has signal counts).
    """
    n_s = np.asarray(n_signal, dtype=np.float64)
    n_i = np.asarray(n_idler, dtype=np.float64)
    ok = n_s > 0
    n_ok = ok.sum(axis=1)
    valid = n_ok > 0
    mean_s = np.where(ok, n_s, 0.0).sum(axis=1) / np.maximum(n_ok, 1)
    resc = np.where(ok, n_i / np.where(ok, n_s, 1.0) * mean_s[:, None], 0.0)
    level = np.where(valid, resc.sum(axis=1) / np.maximum(n_ok, 1), np.nan)
    return level, valid


def rescale_idler(windows: Sequence[WindowCounts]) -> Rescaled:
    if len(windows) < 2:
        raise InsufficientDataError("rescaling needs at least 2 windows")
    return rescale_counts(*count_arrays(windows))


def noise_stats(windows: Sequence[WindowCounts]) -> NoiseStats:
    if len(windows) < 2:
        raise InsufficientDataError("noise statistics need at least 2 windows")
    n_s, n_i = count_arrays(windows)
    rescaled = rescale_counts(n_s, n_i).values
    mean_i = float(n_i.mean())
    std_rescaled = float(rescaled.std(ddof=1)) if rescaled.size > 1 else float("nan")
    return NoiseStats(
        mean_idler=mean_i,
        std_raw=float(n_i.std(ddof=1)),
        std_rescaled=std_rescaled,
        shot_noise_level=math.sqrt(mean_i),
        wavelength_nm=float(windows[0].wavelength_nm),
    )


def correlation_fit(windows: Sequence[WindowCounts]) -> CorrelationFit:
    """Least-squares line of idler on signal counts, with Pearson r."""
    if len(windows) < 3:
        raise InsufficientDataError("correlation fit needs at least 3 windows")
    x, y = count_arrays(windows)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    if sxx == 0:
        raise DegenerateFitError("signal counts have zero variance")
    sxy = float(dx @ dy)
    syy = float(dy @ dy)
    slope = sxy / sxx
    r = sxy / math.sqrt(sxx * syy) if syy > 0 else 0.0
    return CorrelationFit(slope, float(y.mean() - slope * x.mean()), max(-1.0, min(1.0, r)))


def fwhm(values) -> float:
    """Full width at half maximum of the empirical distribution of `values`.

    Histogrammed with Sturges' bin count; the half-maximum crossings on each
    side of the modal bin are linearly interpolated between bin centres.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size < 10:
        raise InsufficientDataError("fwhm needs at least 10 values")
    if np.ptp(v) == 0:
        return 0.0
    k = int(math.ceil(math.log2(v.size))) + 1
    h, edges = np.histogram(v, bins=k)
    bw = edges[1] - edges[0]
    # zero padding so a crossing always exists
    h = np.concatenate([[0], h, [0]]).astype(np.float64)
    centres = np.concatenate([[edges[0] - bw / 2], 0.5 * (edges[:-1] + edges[1:]), [edges[-1] + bw / 2]])
    m = int(np.argmax(h))
    half = h[m] / 2

    j = m
    while h[j] >= half:
        j -= 1
    left = centres[j] + (half - h[j]) / (h[j + 1] - h[j]) * bw
    j = m
    while h[j] >= half:
        j += 1
    right = centres[j] - (half - h[j]) / (h[j - 1] - h[j]) * bw
    return float(right - left)


def write_stats_csv(path, stats: Sequence[NoiseStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wavelength_nm", "mean_idler", "std_raw", "std_rescaled", "shot_noise"])
        for s in stats:
            w.writerow([repr(s.wavelength_nm), repr(s.mean_idler), repr(s.std_raw), repr(s.std_rescaled), repr(s.shot_noise_level)])
