"""Acceptance metrics for the whole chain, shared by the demo report and the test suite."""

from __future__ import annotations

import filecmp
import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import calibration as cal
from . import gating, synthetic, timetag
from .correlation import correlation_fit, fwhm, noise_stats, rescale_idler
from .experiment import ExperimentSettings, run_experiment
from .hypercube import drift_correct
from .sim import SourceConfig, simulate_stream, simulate_windows

N_WINDOWS = 2000
BASE = dict(mean_pairs_per_pulse=1.0, rep_rate_hz=40_000.0, signal_chain_efficiency=0.03,
            idler_chain_efficiency=0.13)


@dataclass
class Check:
    label: str
    value: float
    target: str
    passed: bool


@dataclass
class CriterionResult:
    number: int
    name: str
    checks: list[Check] = field(default_factory=list)
    runtime_s: float = 0.0
    runtime_limit_s: float | None = None

    @property
    def passed(self) -> bool:
        in_time = self.runtime_limit_s is None or self.runtime_s < self.runtime_limit_s
        return in_time and all(c.passed for c in self.checks)

    def add(self, label, value, target, passed):
        self.checks.append(Check(label, float(value), target, bool(passed)))

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        parts = [f"{c.label}={c.value:.6g} ({c.target}{'' if c.passed else ' FAIL'})" for c in self.checks]
        limit = f" < {self.runtime_limit_s:g} s" if self.runtime_limit_s else ""
        return f"[{status}] criterion {self.number} {self.name}: " + "; ".join(parts) + f"; runtime={self.runtime_s:.2f} s{limit}"


def _timed(number, name, limit, fn: Callable[[CriterionResult], None]) -> CriterionResult:
    res = CriterionResult(number, name, runtime_limit_s=limit)
    t0 = time.perf_counter()
    fn(res)
    res.runtime_s = time.perf_counter() - t0
    return res


def noise_suppression(seed: int = 1) -> CriterionResult:
    def body(res):
        cfg = SourceConfig(**BASE, excess_noise_sigma=0.05)
        w = simulate_windows(cfg, 1.0, 3000.0, N_WINDOWS, seed)
        st = noise_stats(w)
        raw = np.array([x.n_idler for x in w], dtype=float)
        resc = rescale_idler(w).values
        res.add("raw_ratio", st.raw_ratio, "> 3", st.raw_ratio > 3)
        res.add("rescaled_ratio", st.rescaled_ratio, "< 2", st.rescaled_ratio < 2)
        f_raw, f_resc = fwhm(raw), fwhm(resc)
        res.add("fwhm_rescaled_over_raw", f_resc / f_raw, "< 1", f_resc < f_raw)
    return _timed(1, "noise suppression", 30.0, body)


def no_improvement(seed: int = 2) -> CriterionResult:
    def body(res):
        cfg = SourceConfig(**BASE, excess_noise_sigma=0.0)
        st = noise_stats(simulate_windows(cfg, 1.0, 3000.0, N_WINDOWS, seed))
        res.add("raw_ratio", st.raw_ratio, "in [0.9, 1.1]", 0.9 <= st.raw_ratio <= 1.1)
        res.add("rescaled_minus_raw", st.rescaled_ratio - st.raw_ratio, ">= -0.05",
                st.rescaled_ratio >= st.raw_ratio - 0.05)
    return _timed(2, "no-improvement regime", 30.0, body)


def correlation(seed: int = 3) -> CriterionResult:
    def body(res):
        noisy = correlation_fit(simulate_windows(SourceConfig(**BASE, excess_noise_sigma=0.1), 1.0, 3000.0, N_WINDOWS, seed))
        quiet = correlation_fit(simulate_windows(SourceConfig(**BASE, excess_noise_sigma=0.0), 1.0, 3000.0, N_WINDOWS, seed + 1000))
        res.add("r_sigma_0.1", noisy.pearson_r, "> 0.8", noisy.pearson_r > 0.8)
        res.add("abs_r_sigma_0", abs(quiet.pearson_r), "< 0.1", abs(quiet.pearson_r) < 0.1)
    return _timed(3, "correlation fit", 30.0, body)


def background_gating(seed: int = 4, n_cycles: int = 1_000_000) -> CriterionResult:
    def body(res):
        cfg = SourceConfig(mean_pairs_per_pulse=0.0, dark_rate_idler_hz=40_000.0)
        duration = n_cycles / cfg.rep_rate_hz
        blob = simulate_stream(cfg, 1.0, 3000.0, duration, seed, window_duration_s=duration)
        header, recs = timetag.decode_stream(blob)
        cycles = timetag.split_by_trigger(recs, header.pulse_period_ps)
        gate = gating.GateWindow(0, gating.DEFAULT_GATE_WIDTH_PS)
        counted = gating.gated_counts(cycles, gate, gate, duration)
        gated = sum(w.n_idler for w in counted)
        total = int((cycles.channel == timetag.IDLER).sum())
        frac = gated / total
        expected = gate.width_ps / header.pulse_period_ps
        res.add("cycles", len(cycles), f"= {n_cycles}", len(cycles) == n_cycles)
        res.add("retained_fraction", frac, f"{expected:.4g} +/- 10%", abs(frac - expected) <= 0.1 * expected)
    return _timed(4, "background suppression by gating", 20.0, body)


def calibration_recovery(seed: int = 5) -> CriterionResult:
    def body(res):
        curve = synthetic.absorption_curve(synthetic.POLYSTYRENE_BANDS)
        ftir = synthetic.ftir_spectrum(curve)
        truth = cal.CalibrationModel(1.01, -5.0, 1.4)
        lam = synthetic.nominal_axis(2900.0, 7.0, 100)
        s, r = synthetic.calibration_counts(curve, truth, lam, None, seed)
        clean = cal.fit_calibration(cal.TransmissionSpectrum(lam, s / r), ftir).model
        s, r = synthetic.calibration_counts(curve, truth, lam, 1e4, seed)
        noisy = cal.fit_calibration(cal.TransmissionSpectrum.from_counts(lam, s, r), ftir).model
        for tag, model, tol in (("noiseless", clean, 1e-3), ("poisson", noisy, 2e-2)):
            for p in ("a", "b", "R"):
                err = abs(getattr(model, p) - getattr(truth, p)) / abs(getattr(truth, p))
                res.add(f"{tag}_{p}_rel_err", err, f"< {tol:g}", err < tol)
    return _timed(5, "calibration fit recovery", 10.0, body)


def energy_conservation(seed: int = 6) -> CriterionResult:
    def body(res):
        i1 = cal.idler_wavelength(1510.0, 1064.0)
        i2 = cal.idler_wavelength(1683.0, 1064.0)
        res.add("idler_1510", i1, "3602.3 +/- 0.1", abs(i1 - 3602.3) <= 0.1)
        res.add("idler_1683", i2, "2892.9 +/- 0.1", abs(i2 - 2892.9) <= 0.1)
        s = np.random.default_rng(seed).uniform(1100.0, 3000.0, 1000)
        back = cal.signal_wavelength(cal.idler_wavelength(s, 1064.0), 1064.0)
        err = float(np.max(np.abs(back - s) / s))
        res.add("round_trip_rel_err", err, "<= 1e-12", err <= 1e-12)
    return _timed(6, "energy-conservation relations", None, body)


def phantom_experiment(seed: int = 7, settings: ExperimentSettings = ExperimentSettings()) -> CriterionResult:
    def body(res):
        m = run_experiment(seed, settings).metrics
        res.add("max_region_rel_error", m["max_region_rel_error"], "< 0.05", m["max_region_rel_error"] < 0.05)
        res.add("contrast_rel_error", m["contrast_rel_error"], "< 0.05", m["contrast_rel_error"] < 0.05)
        res.add("max_spectrum_rms", m["max_spectrum_rms"], "< 0.03", m["max_spectrum_rms"] < 0.03)
    return _timed(7, "end-to-end phantom experiment", 300.0, body)


def _dirs_identical(a, b) -> bool:
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors


def determinism(seed: int = 7, settings: ExperimentSettings = ExperimentSettings(), workers=(1, 2)) -> CriterionResult:
    def body(res):
        with tempfile.TemporaryDirectory() as tmp:
            dirs = []
            for n in workers:
                d = os.path.join(tmp, f"cube_w{n}")
                run_experiment(seed, settings, workers=n).cube.to_directory(d)
                dirs.append(d)
            same = all(_dirs_identical(dirs[0], d) for d in dirs[1:])
            res.add("byte_identical", float(same), f"workers {list(workers)} identical", same)
    return _timed(8, "determinism", None, body)


def drift_exactness(seed: int = 9) -> CriterionResult:
    def body(res):
        rng = np.random.default_rng(seed)
        clean = rng.uniform(100.0, 10_000.0, 256)
        slope, ref0 = 0.005, 10_400.0
        t = np.sort(rng.uniform(10.0, 500.0, 256))
        t_pre, t_post = 2.0, 510.0
        drifted = clean * (1 + slope * t)
        corrected = drift_correct(drifted, ref0 * (1 + slope * t_pre), ref0 * (1 + slope * t_post), t, (t_pre, t_post))
        err = float(np.max(np.abs(corrected - clean / ref0) / (clean / ref0)))
        res.add("max_rel_err", err, "<= 1e-12", err <= 1e-12)
    return _timed(9, "drift-correction exactness", None, body)


ALL = (noise_suppression, no_improvement, correlation, background_gating, calibration_recovery,
       energy_conservation, phantom_experiment, determinism, drift_exactness)


def run_all(seed: int | None = None) -> list[CriterionResult]:
    if seed is None:
        return [fn() for fn in ALL]
    return [fn(seed + k) for k, fn in enumerate(ALL)]
