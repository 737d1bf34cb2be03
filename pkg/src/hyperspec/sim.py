"""Monte Carlo model of the pulsed photon-pair source and its two detection arms.

Each integration window draws one common gain ``g = max(0, N(1, sigma_g))``
that scales pair generation, so excess noise shows up identically in both
arms. Pairs are Poisson distributed and each arm thins them binomially; dark
counts are added independently.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import timetag

logger = logging.getLogger(__name__)

PS_PER_S = 10**12
PS_PER_NS = 1000

REFERENCE_PIXEL = (-1, -1)


class ConfigError(ValueError):
    pass


def substream(seed, *key: int) -> np.random.Generator:
    """Counter-based generator for one (seed, key) cell.

    The same (seed, key) always yields the same stream, independent of which
    process asks for it or in what order.
    """
    if isinstance(seed, np.random.SeedSequence):
        ss = np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(key))
    else:
        ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class SourceConfig:
    rep_rate_hz: float = 40_000.0
    pulse_duration_ns: float = 15.0
    mean_pairs_per_pulse: float = 1.0
    signal_chain_efficiency: float = 0.03
    idler_chain_efficiency: float = 0.13
    dark_rate_signal_hz: float = 0.0
    dark_rate_idler_hz: float = 0.0
    excess_noise_sigma: float = 0.0
    jitter_sigma_ns: float = 3.0
    arrival_offset_ns: float = 50.0
    # (wavelength_nm, relative efficiency) knots, linearly interpolated
    conversion_profile: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if self.rep_rate_hz <= 0:
            raise ConfigError("rep_rate_hz must be positive")
        if self.mean_pairs_per_pulse < 0:
            raise ConfigError("mean_pairs_per_pulse must be >= 0")
        for name in ("signal_chain_efficiency", "idler_chain_efficiency"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        for name in ("dark_rate_signal_hz", "dark_rate_idler_hz", "excess_noise_sigma", "jitter_sigma_ns"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.arrival_offset_ns < self.pulse_period_ps / PS_PER_NS:
            raise ConfigError("arrival_offset_ns must lie inside the pulse period")
        if self.conversion_profile is not None:
            knots = tuple((float(w), float(f)) for w, f in self.conversion_profile)
            object.__setattr__(self, "conversion_profile", knots)
            wl = np.array([k[0] for k in knots])
            fac = np.array([k[1] for k in knots])
            if wl.size == 0 or np.any(np.diff(wl) <= 0):
                raise ConfigError("conversion_profile wavelengths must be strictly increasing")
            if np.any(fac <= 0) or np.any(fac > 1):
                raise ConfigError("conversion_profile factors must lie in (0, 1]")

    @property
    def pulse_period_ps(self) -> int:
        return int(round(PS_PER_S / self.rep_rate_hz))

    def profile(self, wavelength_nm: float) -> float:
        if self.conversion_profile is None:
            return 1.0
        wl = np.array([k[0] for k in self.conversion_profile])
        fac = np.array([k[1] for k in self.conversion_profile])
        if not wl[0] <= wavelength_nm <= wl[-1]:
            raise ConfigError(
                f"wavelength {wavelength_nm} nm outside conversion profile [{wl[0]}, {wl[-1]}]"
            )
        return float(np.interp(wavelength_nm, wl, fac))

    @classmethod
    def from_mapping(cls, data: Mapping) -> "SourceConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown source keys: {sorted(unknown)}")
        kwargs = dict(data)
        prof = kwargs.get("conversion_profile")
        if isinstance(prof, Mapping):
            kwargs["conversion_profile"] = tuple(sorted((float(k), float(v)) for k, v in prof.items()))
        elif prof is not None:
            kwargs["conversion_profile"] = tuple((float(w), float(f)) for w, f in prof)
        return cls(**kwargs)


@dataclass(frozen=True)
class WindowCounts:
    n_signal: int
    n_idler: int
    window_duration_s: float = 2.0
    wavelength_nm: float = float("nan")
    pixel: tuple[int, int] = REFERENCE_PIXEL

    def __post_init__(self):
        if self.n_signal < 0 or self.n_idler < 0:
            raise ValueError("counts must be non-negative")
        if self.window_duration_s <= 0:
            raise ValueError("window_duration_s must be positive")


def _check_transmission(t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"transmission {t} outside [0, 1]")


def draw_window(
    cfg: SourceConfig,
    transmission: float,
    wavelength_nm: float,
    rng: np.random.Generator,
    duration_s: float = 2.0,
    flux_scale: float = 1.0,
    dark_fraction: float = 1.0,
) -> tuple[int, int]:
    gain = max(0.0, rng.normal(1.0, cfg.excess_noise_sigma)) if cfg.excess_noise_sigma > 0 else 1.0
    lam = gain * flux_scale * cfg.mean_pairs_per_pulse * cfg.rep_rate_hz * duration_s * cfg.profile(wavelength_nm)
    pairs = rng.poisson(lam)
    n_s = rng.binomial(pairs, cfg.signal_chain_efficiency)
    n_i = rng.binomial(pairs, transmission * cfg.idler_chain_efficiency)
    n_s += rng.poisson(cfg.dark_rate_signal_hz * duration_s * dark_fraction)
    n_i += rng.poisson(cfg.dark_rate_idler_hz * duration_s * dark_fraction)
    return int(n_s), int(n_i)


def simulate_window(
    cfg: SourceConfig,
    transmission: float,
    wavelength_nm: float,
    seed,
    *,
    duration_s: float = 2.0,
    flux_scale: float = 1.0,
    dark_fraction: float = 1.0,
    pixel: tuple[int, int] = REFERENCE_PIXEL,
) -> WindowCounts:
    """Gated signal/idler counts for one integration window.

    `dark_fraction` is the share of the dark-count stream that survives the
    detection gate (1.0 treats the rates as already gated). `flux_scale`
    multiplies the pair rate, e.g. for slow source drift.
    """
    _check_transmission(transmission)
    rng = seed if isinstance(seed, np.random.Generator) else substream(seed)
    n_s, n_i = draw_window(cfg, transmission, wavelength_nm, rng, duration_s, flux_scale, dark_fraction)
    return WindowCounts(n_s, n_i, duration_s, float(wavelength_nm), pixel)


def simulate_windows(
    cfg: SourceConfig,
    transmission: float,
    wavelength_nm: float,
    n_windows: int,
    seed,
    *,
    duration_s: float = 2.0,
    dark_fraction: float = 1.0,
) -> list[WindowCounts]:
    """Independent windows, window k drawn from substream (seed, k)."""
    _check_transmission(transmission)
    return [
        simulate_window(
            cfg, transmission, wavelength_nm, substream(seed, k),
            duration_s=duration_s, dark_fraction=dark_fraction,
        )
        for k in range(n_windows)
    ]


def _arrival_offsets(cfg: SourceConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    period = cfg.pulse_period_ps
    mu = cfg.arrival_offset_ns * PS_PER_NS
    sd = cfg.jitter_sigma_ns * PS_PER_NS
    off = np.rint(rng.normal(mu, sd, n)) if sd > 0 else np.full(n, mu)
    return np.clip(off, 0, period - 1).astype(np.int64)


def stream_records(
    cfg: SourceConfig,
    transmission: float,
    wavelength_nm: float,
    duration_s: float,
    seed,
    *,
    window_duration_s: float = 2.0,
) -> np.ndarray:
    """Simulated time-tag records, sorted, as a RECORD_DTYPE array."""
    _check_transmission(transmission)
    if duration_s <= 0:
        raise ConfigError("duration_s must be positive")
    period = cfg.pulse_period_ps
    n_pulses = int(round(duration_s * cfg.rep_rate_hz))
    per_window = max(1, int(round(window_duration_s * cfg.rep_rate_hz)))
    profile = cfg.profile(wavelength_nm)
    chans, times = [np.zeros(n_pulses, np.int64)], [np.arange(n_pulses, dtype=np.int64) * period]
    for w, start in enumerate(range(0, n_pulses, per_window)):
        rng = substream(seed, w)
        n = min(per_window, n_pulses - start)
        gain = max(0.0, rng.normal(1.0, cfg.excess_noise_sigma)) if cfg.excess_noise_sigma > 0 else 1.0
        pairs = rng.poisson(gain * cfg.mean_pairs_per_pulse * profile, n)
        t0 = start * period
        span = n * period
        for ch, eff, dark in (
            (timetag.SIGNAL, cfg.signal_chain_efficiency, cfg.dark_rate_signal_hz),
            (timetag.IDLER, transmission * cfg.idler_chain_efficiency, cfg.dark_rate_idler_hz),
        ):
            hits = rng.binomial(pairs, eff)
            pulse_idx = np.repeat(np.arange(n, dtype=np.int64), hits)
            t_corr = t0 + pulse_idx * period + _arrival_offsets(cfg, pulse_idx.size, rng)
            n_dark = rng.poisson(dark * n / cfg.rep_rate_hz)
            t_dark = t0 + rng.integers(0, span, n_dark, dtype=np.int64)
            t = np.concatenate([t_corr, t_dark])
            chans.append(np.full(t.size, ch, np.int64))
            times.append(t)
    ch = np.concatenate(chans)
    t = np.concatenate(times)
    order = np.lexsort((ch, t))
    return timetag.make_records(ch[order], t[order])


def simulate_stream(
    cfg: SourceConfig,
    transmission: float,
    wavelength_nm: float,
    duration_s: float,
    seed,
    *,
    window_duration_s: float = 2.0,
) -> bytes:
    """Encoded .ttg stream with one trigger per laser pulse.

    Correlated clicks land at ``trigger + N(arrival_offset, jitter)``; dark
    clicks are uniform in time. The common gain is redrawn every
    `window_duration_s`, so gating the stream at that window length
    reproduces `simulate_window` statistics.
    """
    recs = stream_records(cfg, transmission, wavelength_nm, duration_s, seed, window_duration_s=window_duration_s)
    header = timetag.StreamHeader(resolution_ps=1, pulse_period_ps=cfg.pulse_period_ps)
    return timetag.encode_stream(header, recs)


class Phantom:
    """Ground-truth transmission keyed by (ix, iy, wavelength_nm).

    Wraps either a mapping or a callable ``f(ix, iy, wavelength_nm)``.
    """

    def __init__(self, source: Mapping | Callable[[int, int, float], float]):
        if callable(source) and not isinstance(source, Mapping):
            self._fn = source
            self._map = None
        else:
            self._fn = None
            self._map = {(int(ix), int(iy), round(float(wl), 6)): float(t) for (ix, iy, wl), t in source.items()}

    def __call__(self, ix: int, iy: int, wavelength_nm: float) -> float:
        if self._fn is not None:
            return float(self._fn(ix, iy, wavelength_nm))
        key = (int(ix), int(iy), round(float(wavelength_nm), 6))
        try:
            return self._map[key]
        except KeyError:
            raise KeyError(f"phantom has no entry for pixel ({ix}, {iy}) at {wavelength_nm} nm") from None

    def as_array(self, nx: int, ny: int, wavelengths_nm: Sequence[float]) -> np.ndarray:
        out = np.empty((nx, ny, len(wavelengths_nm)))
        for k, wl in enumerate(wavelengths_nm):
            for ix in range(nx):
                for iy in range(ny):
                    out[ix, iy, k] = self(ix, iy, wl)
        if np.any((out < 0) | (out > 1)):
            raise ValueError("phantom transmission outside [0, 1]")
        return out

    def items(self):
        if self._map is None:
            raise TypeError("callable phantom has no enumerable entries")
        return self._map.items()


def _simulate_rows(cfg, trans, rows, drift_slope_per_s, seed):
    n_s = np.empty(len(rows), np.int64)
    n_i = np.empty(len(rows), np.int64)
    for k, r in enumerate(rows):
        kind, plane, ix, iy, window = int(r["kind"]), int(r["plane"]), int(r["ix"]), int(r["iy"]), int(r["window"])
        t_mid = r["t_start_s"] + 0.5 * r["duration_s"]
        T = trans[ix, iy, plane] if kind == 0 else 1.0
        # keys must be non-negative; kind separates references from pixels
        rng = substream(seed, plane, kind, max(ix, 0), max(iy, 0), window)
        n_s[k], n_i[k] = draw_window(
            cfg, T, r["wavelength_nm"], rng, r["duration_s"], 1.0 + drift_slope_per_s * t_mid
        )
    return n_s, n_i


def simulate_scan(cfg: SourceConfig, phantom, plan, drift_slope_per_s: float, seed, *, workers: int = 1):
    """Raw counts for every pixel, plane and reference point of `plan`.

    Source flux drifts as ``1 + drift_slope_per_s * t`` over the whole
    acquisition, t being the window midpoint. Reference points see
    transmission 1. Results do not depend on `workers`.
    """
    from .hypercube import RawDataset

    if not isinstance(phantom, Phantom):
        phantom = Phantom(phantom)
    trans = phantom.as_array(plan.nx, plan.ny, plan.wavelengths_nm)
    rows = plan.acquisition_order()
    if workers <= 1:
        n_s, n_i = _simulate_rows(cfg, trans, rows, drift_slope_per_s, seed)
    else:
        chunks = np.array_split(np.arange(len(rows)), workers * 4)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_simulate_rows, cfg, trans, rows[c], drift_slope_per_s, seed) for c in chunks]
            parts = [f.result() for f in futs]
        n_s = np.concatenate([p[0] for p in parts])
        n_i = np.concatenate([p[1] for p in parts])
    return RawDataset.from_rows(rows, n_s, n_i, plan)
