"""Transmission normalisation, pair-wavelength relations and wavelength-axis calibration.

The calibration model maps a nominal wavelength to ``a * lam + b`` and lets
the optical depth of the reference scale by a relative thickness ``R``::

    absorptance(lam) = 1 - (1 - A(a*lam + b)) ** R,   A(lam) = 1 - exp(-od(lam))

where ``od`` is the optical depth read off an FTIR reference. Only the
product of absorption coefficient and thickness is identifiable, so ``od``
is stored directly.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

FTIR_CLAMP = 1e-6


class CalibrationDataError(ValueError):
    pass


class ExtrapolationError(ValueError):
    pass


class NonConvergenceError(RuntimeError):
    def __init__(self, cost: float, iterations: int):
        super().__init__(f"fit did not converge: cost={cost:.6g} after {iterations} iterations")
        self.cost = cost
        self.iterations = iterations


# --- pair wavelengths -------------------------------------------------------


def idler_wavelength(signal_nm, pump_nm=1064.0):
    """Idler wavelength from energy conservation, ``1/idler = 1/pump - 1/signal``."""
    s = np.asarray(signal_nm, dtype=np.float64)
    if np.any(s <= pump_nm):
        raise ValueError("signal wavelength must exceed the pump wavelength")
    out = 1.0 / (1.0 / pump_nm - 1.0 / s)
    return float(out) if out.ndim == 0 else out


def signal_wavelength(idler_nm, pump_nm=1064.0):
    i = np.asarray(idler_nm, dtype=np.float64)
    if np.any(i <= pump_nm):
        raise ValueError("idler wavelength must exceed the pump wavelength")
    out = 1.0 / (1.0 / pump_nm - 1.0 / i)
    return float(out) if out.ndim == 0 else out


def upconverted_wavelength(input_nm, pump_nm=1064.0):
    """Sum-frequency wavelength ``input*pump / (input + pump)``."""
    x = np.asarray(input_nm, dtype=np.float64)
    if np.any(x <= 0) or pump_nm <= 0:
        raise ValueError("wavelengths must be positive")
    out = x * pump_nm / (x + pump_nm)
    return float(out) if out.ndim == 0 else out


# --- spectra ----------------------------------------------------------------


def transmission(sample, reference):
    """``sample / reference``, masked where the reference is not positive.

    Scalars come back as float or ``np.ma.masked``; arrays as masked arrays.
    """
    s = np.asarray(sample, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    bad = r <= 0
    out = np.ma.masked_array(s / np.where(bad, 1.0, r), mask=np.broadcast_to(bad, np.broadcast(s, r).shape))
    if out.ndim == 0:
        return np.ma.masked if out.mask else float(out)
    return out


@dataclass(frozen=True)
class TransmissionSpectrum:
    wavelengths_nm: np.ndarray
    transmission: np.ndarray
    uncertainty: np.ndarray | None = None
    source: str = "single-photon"

    def __post_init__(self):
        wl = np.asarray(self.wavelengths_nm, dtype=np.float64)
        tr = np.asarray(self.transmission, dtype=np.float64)
        if wl.shape != tr.shape or wl.ndim != 1:
            raise CalibrationDataError("wavelengths and transmission must be 1-D and equal length")
        if wl.size > 1 and np.any(np.diff(wl) <= 0):
            raise CalibrationDataError("wavelengths must be strictly increasing")
        if not np.all(np.isfinite(tr)) or np.any(tr < 0):
            raise CalibrationDataError("transmission must be finite and non-negative")
        unc = self.uncertainty
        unc = np.zeros_like(tr) if unc is None else np.asarray(unc, dtype=np.float64)
        object.__setattr__(self, "wavelengths_nm", wl)
        object.__setattr__(self, "transmission", tr)
        object.__setattr__(self, "uncertainty", unc)

    def __len__(self):
        return len(self.wavelengths_nm)

    @classmethod
    def from_counts(cls, wavelengths_nm, counts_sample, counts_ref, source="single-photon"):
        """Ratio spectrum with Poisson-propagated uncertainty; zero-reference points are dropped."""
        wl = np.asarray(wavelengths_nm, dtype=np.float64)
        s = np.asarray(counts_sample, dtype=np.float64)
        r = np.asarray(counts_ref, dtype=np.float64)
        t = transmission(s, r)
        ok = ~np.ma.getmaskarray(t)
        tv = np.asarray(t.filled(0.0))[ok]
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.sqrt(np.where(s[ok] > 0, 1.0 / s[ok], 0.0) + 1.0 / r[ok])
        return cls(wl[ok], tv, tv * rel, source)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["wavelength_nm", "transmission", "uncertainty"])
            for row in zip(self.wavelengths_nm, self.transmission, self.uncertainty):
                w.writerow([repr(float(v)) for v in row])


@dataclass(frozen=True)
class AbsorptionCurve:
    """Optical depth (absorption coefficient times reference thickness) vs wavelength."""

    wavelengths_nm: np.ndarray
    optical_depth: np.ndarray

    def __post_init__(self):
        wl = np.asarray(self.wavelengths_nm, dtype=np.float64)
        od = np.asarray(self.optical_depth, dtype=np.float64)
        if wl.shape != od.shape or wl.size < 2:
            raise CalibrationDataError("absorption curve needs >= 2 matching points")
        if np.any(np.diff(wl) <= 0):
            raise CalibrationDataError("absorption curve wavelengths must be strictly increasing")
        if np.any(od < 0):
            raise CalibrationDataError("optical depth must be >= 0")
        object.__setattr__(self, "wavelengths_nm", wl)
        object.__setattr__(self, "optical_depth", od)

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.wavelengths_nm[0]), float(self.wavelengths_nm[-1])

    def __call__(self, wavelength_nm):
        x = np.asarray(wavelength_nm, dtype=np.float64)
        lo, hi = self.domain
        if np.any(x < lo) or np.any(x > hi):
            raise ExtrapolationError(f"wavelength outside absorption curve domain [{lo}, {hi}] nm")
        out = np.interp(x, self.wavelengths_nm, self.optical_depth)
        return float(out) if out.ndim == 0 else out

    @classmethod
    def from_transmission(cls, spectrum: TransmissionSpectrum, eps: float = FTIR_CLAMP) -> "AbsorptionCurve":
        t = np.clip(spectrum.transmission, eps, 1.0)
        return cls(spectrum.wavelengths_nm, -np.log(t))


@dataclass(frozen=True)
class CalibrationModel:
    a: float = 1.0
    b: float = 0.0
    R: float = 1.0

    def __post_init__(self):
        if not self.a > 0:
            raise CalibrationDataError(f"a must be positive, got {self.a}")
        if not self.R > 0:
            raise CalibrationDataError(f"R must be positive, got {self.R}")

    def map(self, wavelength_nm):
        return self.a * np.asarray(wavelength_nm, dtype=np.float64) + self.b

    def inverse(self, wavelength_nm):
        return (np.asarray(wavelength_nm, dtype=np.float64) - self.b) / self.a

    def to_json(self, path, **extra) -> None:
        with open(path, "w") as fh:
            json.dump({"a": self.a, "b": self.b, "R": self.R, **extra}, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "CalibrationModel":
        with open(path) as fh:
            d = json.load(fh)
        return cls(float(d["a"]), float(d["b"]), float(d["R"]))


IDENTITY = CalibrationModel()


def absorptance_model(wavelength_nm, model: CalibrationModel, curve: AbsorptionCurve):
    """``1 - (1 - A_sp)**R`` with single-pass absorptance ``A_sp = 1 - exp(-od)``.

    Evaluated as ``-expm1(-R * od)``, the same quantity without the
    cancellation in ``1 - (1 - A_sp)``.
    """
    out = -np.expm1(-model.R * np.asarray(curve(model.map(wavelength_nm))))
    return float(out) if np.ndim(out) == 0 else out


def model_transmission(wavelength_nm, model: CalibrationModel, curve: AbsorptionCurve):
    """Transmission predicted by the calibration model, ``exp(-R * od(a*lam + b))``."""
    out = np.exp(-model.R * np.asarray(curve(model.map(wavelength_nm))))
    return float(out) if np.ndim(out) == 0 else out


# --- fitting ----------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationFit:
    model: CalibrationModel
    residual_rms: float
    iterations: int
    cost: float


def _residuals(p, lam, t_meas, curve):
    a, b, R = p
    if a <= 0 or R <= 0:
        return None
    x = a * lam + b
    lo, hi = curve.domain
    if x.min() < lo or x.max() > hi:
        return None
    od = np.interp(x, curve.wavelengths_nm, curve.optical_depth)
    return np.exp(-R * od) - t_meas


def _jacobian(p, lam, t_meas, curve, rel_step):
    J = np.empty((lam.size, p.size))
    for j in range(p.size):
        h = rel_step * max(abs(p[j]), 1.0)
        up, dn = p.copy(), p.copy()
        up[j] += h
        dn[j] -= h
        r_up = _residuals(up, lam, t_meas, curve)
        r_dn = _residuals(dn, lam, t_meas, curve)
        if r_up is None or r_dn is None:
            r0 = _residuals(p, lam, t_meas, curve)
            if r_up is not None:
                J[:, j] = (r_up - r0) / h
            elif r_dn is not None:
                J[:, j] = (r0 - r_dn) / h
            else:
                J[:, j] = 0.0
        else:
            J[:, j] = (r_up - r_dn) / (2 * h)
    return J


def fit_calibration(
    measured: TransmissionSpectrum,
    ftir: TransmissionSpectrum | AbsorptionCurve,
    *,
    initial: CalibrationModel = IDENTITY,
    max_iter: int = 200,
    rtol: float = 1e-8,
    rel_step: float = 1e-6,
    min_overlap: int = 10,
) -> CalibrationFit:
    """Least-squares fit of (a, b, R) so the model transmission matches `measured`.

    Levenberg-Marquardt with Marquardt diagonal scaling and a central
    difference Jacobian. Stops when the relative cost change falls below
    `rtol`; raises NonConvergenceError after `max_iter` iterations.
    """
    curve = ftir if isinstance(ftir, AbsorptionCurve) else AbsorptionCurve.from_transmission(ftir)
    lam = measured.wavelengths_nm
    t_meas = measured.transmission
    lo, hi = curve.domain
    inside = (initial.map(lam) >= lo) & (initial.map(lam) <= hi)
    if inside.sum() < min_overlap:
        raise CalibrationDataError(
            f"only {int(inside.sum())} measured points overlap the reference (need {min_overlap})"
        )
    lam, t_meas = lam[inside], t_meas[inside]

    p = np.array([initial.a, initial.b, initial.R], dtype=np.float64)
    r = _residuals(p, lam, t_meas, curve)
    cost = 0.5 * float(r @ r)
    damping = 1e-3
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        J = _jacobian(p, lam, t_meas, curve, rel_step)
        A = J.T @ J
        g = J.T @ r
        diag = np.diag(A).copy()
        diag[diag == 0] = 1.0
        improved = False
        while damping < 1e16:
            try:
                step = np.linalg.solve(A + damping * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                damping *= 10
                continue
            r_new = _residuals(p + step, lam, t_meas, curve)
            if r_new is not None:
                cost_new = 0.5 * float(r_new @ r_new)
                if cost_new < cost:
                    improved = True
                    break
            damping *= 10
        if not improved:
            # no downhill step at any damping: stationary point
            converged = True
            break
        rel_change = (cost - cost_new) / cost if cost > 0 else 0.0
        p = p + step
        r, cost = r_new, cost_new
        damping = max(damping / 10, 1e-12)
        if rel_change < rtol or cost < 1e-30:
            converged = True
            break
    if not converged:
        raise NonConvergenceError(cost, it)
    model = CalibrationModel(*map(float, p))
    rms = math.sqrt(2 * cost / lam.size)
    logger.debug("calibration fit a=%g b=%g R=%g rms=%g in %d iterations", *p, rms, it)
    return CalibrationFit(model, rms, it, cost)


def apply_calibration(model: CalibrationModel, obj):
    """Return `obj` with every wavelength replaced by ``a*lam + b``; data untouched.

    Works on arrays and on any dataclass carrying a ``wavelengths_nm`` field
    (spectra, cubes).
    """
    if dataclasses.is_dataclass(obj) and hasattr(obj, "wavelengths_nm"):
        return dataclasses.replace(obj, wavelengths_nm=model.map(obj.wavelengths_nm))
    return model.map(obj)


# --- file formats -----------------------------------------------------------


def _read_columns(path, required):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise CalibrationDataError(f"{path}: empty file")
        fields = [f.strip() for f in reader.fieldnames]
        missing = [c for c in required if c not in fields]
        if missing:
            raise CalibrationDataError(f"{path}: missing columns {missing}")
        rows = [{k.strip(): v for k, v in row.items()} for row in reader]
    try:
        return {c: np.array([float(row[c]) for row in rows]) for c in required}
    except (TypeError, ValueError) as exc:
        raise CalibrationDataError(f"{path}: non-numeric value ({exc})") from None


def read_ftir_csv(path) -> TransmissionSpectrum:
    """FTIR reference, columns wavelength_nm and transmission; any row order."""
    cols = _read_columns(path, ["wavelength_nm", "transmission"])
    order = np.argsort(cols["wavelength_nm"], kind="stable")
    return TransmissionSpectrum(cols["wavelength_nm"][order], cols["transmission"][order], source="ftir")


def read_counts_csv(path) -> TransmissionSpectrum:
    """Single-photon spectrum, columns wavelength_nm, counts_sample, counts_ref."""
    cols = _read_columns(path, ["wavelength_nm", "counts_sample", "counts_ref"])
    order = np.argsort(cols["wavelength_nm"], kind="stable")
    return TransmissionSpectrum.from_counts(
        cols["wavelength_nm"][order], cols["counts_sample"][order], cols["counts_ref"][order]
    )


def write_ftir_csv(path, spectrum: TransmissionSpectrum) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wavelength_nm", "transmission"])
        for wl, t in zip(spectrum.wavelengths_nm, spectrum.transmission):
            w.writerow([repr(float(wl)), repr(float(t))])


def write_counts_csv(path, wavelengths_nm, counts_sample, counts_ref) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wavelength_nm", "counts_sample", "counts_ref"])
        for row in zip(wavelengths_nm, counts_sample, counts_ref):
            w.writerow([repr(float(row[0])), int(row[1]), int(row[2])])
