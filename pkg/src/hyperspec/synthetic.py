"""Synthetic absorption spectra, FTIR references and phantoms for end-to-end runs."""

from __future__ import annotations

import numpy as np

from .calibration import AbsorptionCurve, CalibrationModel, TransmissionSpectrum, model_transmission
from .sim import SourceConfig, substream

# (centre_nm, optical depth at peak, gaussian sigma_nm)
POLYSTYRENE_BANDS = (
    (3268.0, 0.55, 14.0),  # aromatic C-H stretch
    (3305.0, 0.85, 16.0),
    (3420.0, 1.10, 20.0),  # aliphatic asymmetric C-H
    (3509.0, 0.70, 18.0),  # aliphatic symmetric C-H
)
POLYETHYLENE_BANDS = (
    (3420.0, 1.60, 22.0),
    (3509.0, 1.20, 20.0),
    (3380.0, 0.30, 15.0),
)

FTIR_GRID_NM = (2700.0, 3900.0, 0.5)


def band_optical_depth(wavelengths_nm, bands, baseline: float = 0.02):
    wl = np.asarray(wavelengths_nm, dtype=np.float64)
    od = np.full(wl.shape, baseline)
    for centre, depth, sigma in bands:
        od += depth * np.exp(-0.5 * ((wl - centre) / sigma) ** 2)
    return od


def absorption_curve(bands, baseline: float = 0.02, grid=FTIR_GRID_NM) -> AbsorptionCurve:
    wl = np.arange(grid[0], grid[1] + grid[2] / 2, grid[2])
    return AbsorptionCurve(wl, band_optical_depth(wl, bands, baseline))


def ftir_spectrum(curve: AbsorptionCurve) -> TransmissionSpectrum:
    return TransmissionSpectrum(curve.wavelengths_nm, np.exp(-curve.optical_depth), source="ftir")


def nominal_axis(start_nm: float = 2900.0, step_nm: float = 7.0, n: int = 100) -> np.ndarray:
    return start_nm + step_nm * np.arange(n)


def calibration_counts(
    curve: AbsorptionCurve,
    truth: CalibrationModel,
    wavelengths_nm,
    counts_per_point: float | None,
    seed,
):
    """Sample and reference counts for a calibration sheet measured on a miscalibrated axis.

    ``counts_per_point=None`` gives noiseless expectations (floats).
    """
    t_true = model_transmission(wavelengths_nm, truth, curve)
    if counts_per_point is None:
        return np.asarray(t_true, dtype=np.float64), np.ones_like(t_true)
    rng = substream(seed, 0)
    sample = rng.poisson(counts_per_point * t_true)
    ref = rng.poisson(counts_per_point, size=np.shape(t_true))
    return sample, ref


def two_material_phantom(nx: int, ny: int, wavelengths_nm, axis: CalibrationModel,
                         curve_a: AbsorptionCurve, curve_b: AbsorptionCurve,
                         thickness_a: float = 1.0, thickness_b: float = 1.0):
    """Transmission for a disc of material B inside a field of material A.

    The phantom is keyed by nominal wavelength; the physical wavelength seen
    by the sample is ``axis.map(nominal)`` (``axis.R`` is ignored). Returns
    (mapping, region_b mask, true transmission array (nx, ny, n_planes)).
    """
    wl = np.asarray(wavelengths_nm, dtype=np.float64)
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    cx, cy = (nx - 1) / 2, (ny - 1) / 2
    region_b = (ix - cx) ** 2 + (iy - cy) ** 2 <= (0.3 * min(nx, ny)) ** 2
    physical = axis.map(wl)
    t_a = np.exp(-thickness_a * np.asarray(curve_a(physical)))
    t_b = np.exp(-thickness_b * np.asarray(curve_b(physical)))
    truth_arr = np.where(region_b[..., None], t_b[None, None, :], t_a[None, None, :])
    mapping = {
        (i, j, float(w)): float(truth_arr[i, j, k])
        for i in range(nx) for j in range(ny) for k, w in enumerate(wl)
    }
    return mapping, region_b, truth_arr


def default_demo_source(**overrides) -> SourceConfig:
    base = dict(
        mean_pairs_per_pulse=1.0,
        signal_chain_efficiency=0.03,
        idler_chain_efficiency=0.13,
        excess_noise_sigma=0.05,
        dark_rate_signal_hz=0.0,
        dark_rate_idler_hz=0.0,
    )
    base.update(overrides)
    return SourceConfig(**base)
