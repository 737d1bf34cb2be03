"""Scan planning, reference-based drift correction and hyperspectral cube assembly."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .calibration import CalibrationModel, TransmissionSpectrum
from .correlation import rescale_batches

PIXEL, PRE_REF, POST_REF = 0, 1, 2
KIND_NAMES = {PIXEL: "pixel", PRE_REF: "pre", POST_REF: "post"}

WAVELENGTH_RANGE_NM = (2900.0, 3600.0)
RATIO_FLOOR = 1e-3

ACQ_DTYPE = np.dtype([
    ("kind", "u1"), ("plane", "<i4"), ("ix", "<i4"), ("iy", "<i4"), ("window", "<i4"),
    ("wavelength_nm", "<f8"), ("t_start_s", "<f8"), ("duration_s", "<f8"),
])
RAW_DTYPE = np.dtype(ACQ_DTYPE.descr + [("n_signal", "<i8"), ("n_idler", "<i8")])


class ScanConfigError(ValueError):
    pass


class AssemblyError(ValueError):
    pass


class DriftReferenceError(ValueError):
    pass


def _default_wavelengths():
    return tuple(float(w) for w in np.arange(2900.0, 3600.0 + 1e-9, 50.0))


@dataclass(frozen=True)
class ScanPlan:
    x_extent_um: float = 775.0
    y_extent_um: float = 775.0
    step_um: float = 25.0
    wavelengths_nm: tuple[float, ...] = field(default_factory=_default_wavelengths)
    dwell_s: float = 2.0
    reference_points_per_plane: int = 4
    windows_per_pixel: int = 1

    def __post_init__(self):
        if self.step_um <= 0:
            raise ScanConfigError("step_um must be positive")
        if self.step_um > min(self.x_extent_um, self.y_extent_um):
            raise ScanConfigError(f"step {self.step_um} um exceeds scan extent")
        wl = tuple(float(w) for w in self.wavelengths_nm)
        object.__setattr__(self, "wavelengths_nm", wl)
        if not wl:
            raise ScanConfigError("no wavelength planes")
        if any(b <= a for a, b in zip(wl, wl[1:])):
            raise ScanConfigError("wavelengths must be strictly increasing")
        lo, hi = WAVELENGTH_RANGE_NM
        if wl[0] < lo or wl[-1] > hi:
            raise ScanConfigError(f"wavelengths must lie within [{lo}, {hi}] nm")
        if self.dwell_s <= 0:
            raise ScanConfigError("dwell_s must be positive")
        if self.reference_points_per_plane < 1:
            raise ScanConfigError("need at least one reference point before and after each plane")
        if self.windows_per_pixel < 1:
            raise ScanConfigError("windows_per_pixel must be >= 1")

    @property
    def nx(self) -> int:
        return int(math.floor(self.x_extent_um / self.step_um + 1e-9)) + 1

    @property
    def ny(self) -> int:
        return int(math.floor(self.y_extent_um / self.step_um + 1e-9)) + 1

    @property
    def n_planes(self) -> int:
        return len(self.wavelengths_nm)

    @property
    def window_s(self) -> float:
        return self.dwell_s / self.windows_per_pixel

    @property
    def plane_dwell_s(self) -> float:
        """Time spent on sample pixels in one plane."""
        return self.nx * self.ny * self.dwell_s

    @property
    def plane_duration_s(self) -> float:
        return self.plane_dwell_s + 2 * self.reference_points_per_plane * self.dwell_s

    def pixel_order(self) -> list[tuple[int, int]]:
        """Serpentine raster: x runs forward on even rows, backward on odd rows."""
        order = []
        for iy in range(self.ny):
            xs = range(self.nx) if iy % 2 == 0 else range(self.nx - 1, -1, -1)
            order.extend((ix, iy) for ix in xs)
        return order

    def acquisition_order(self) -> np.ndarray:
        """One row per integration window, in the order they are acquired.

        Each plane is: pre-reference points, every pixel, post-reference
        points. Reference rows carry the reference index in ``ix`` and -1 in
        ``iy``. Time runs continuously across planes.
        """
        n_ref = self.reference_points_per_plane
        n_pix = self.nx * self.ny
        wpp = self.windows_per_pixel
        per_plane = (n_pix + 2 * n_ref) * wpp
        rows = np.zeros(per_plane * self.n_planes, dtype=ACQ_DTYPE)
        order = self.pixel_order()
        pts = (
            [(PRE_REF, r, -1) for r in range(n_ref)]
            + [(PIXEL, ix, iy) for ix, iy in order]
            + [(POST_REF, r, -1) for r in range(n_ref)]
        )
        kinds = np.repeat([p[0] for p in pts], wpp)
        ixs = np.repeat([p[1] for p in pts], wpp)
        iys = np.repeat([p[2] for p in pts], wpp)
        wins = np.tile(np.arange(wpp), len(pts))
        dt = self.window_s
        for k, wl in enumerate(self.wavelengths_nm):
            sl = slice(k * per_plane, (k + 1) * per_plane)
            rows["kind"][sl] = kinds
            rows["plane"][sl] = k
            rows["ix"][sl] = ixs
            rows["iy"][sl] = iys
            rows["window"][sl] = wins
            rows["wavelength_nm"][sl] = wl
            rows["t_start_s"][sl] = (k * per_plane + np.arange(per_plane)) * dt
            rows["duration_s"][sl] = dt
        return rows

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wavelengths_nm"] = list(self.wavelengths_nm)
        return d


def build_scan_plan(config: Mapping | None = None, **overrides) -> ScanPlan:
    """ScanPlan from a mapping of ScanPlan fields.

    Besides an explicit ``wavelengths_nm`` list, ``wavelength_start_nm``,
    ``wavelength_stop_nm`` and ``wavelength_step_nm`` generate an inclusive
    evenly spaced axis.
    """
    cfg = dict(config or {})
    cfg.update(overrides)
    start = cfg.pop("wavelength_start_nm", None)
    stop = cfg.pop("wavelength_stop_nm", None)
    step = cfg.pop("wavelength_step_nm", None)
    if start is not None or stop is not None or step is not None:
        if "wavelengths_nm" in cfg:
            raise ScanConfigError("give either wavelengths_nm or start/stop/step, not both")
        if start is None or stop is None or step is None or step <= 0:
            raise ScanConfigError("wavelength start, stop and positive step are all required")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        cfg["wavelengths_nm"] = tuple(float(start + i * step) for i in range(n))
    known = set(ScanPlan.__dataclass_fields__)
    unknown = set(cfg) - known
    if unknown:
        raise ScanConfigError(f"unknown scan keys: {sorted(unknown)}")
    if "wavelengths_nm" in cfg:
        cfg["wavelengths_nm"] = tuple(cfg["wavelengths_nm"])
    return ScanPlan(**cfg)


@dataclass(frozen=True)
class RawDataset:
    rows: np.ndarray
    plan: ScanPlan

    @classmethod
    def from_rows(cls, acq_rows: np.ndarray, n_signal, n_idler, plan: ScanPlan) -> "RawDataset":
        rows = np.zeros(len(acq_rows), dtype=RAW_DTYPE)
        for name in ACQ_DTYPE.names:
            rows[name] = acq_rows[name]
        rows["n_signal"] = n_signal
        rows["n_idler"] = n_idler
        return cls(rows, plan)

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "plane", "ix", "iy", "window", "wavelength_nm", "t_start_s",
                        "duration_s", "n_signal", "n_idler"])
            for r in self.rows:
                w.writerow([
                    KIND_NAMES[int(r["kind"])], int(r["plane"]), int(r["ix"]), int(r["iy"]), int(r["window"]),
                    repr(float(r["wavelength_nm"])), repr(float(r["t_start_s"])), repr(float(r["duration_s"])),
                    int(r["n_signal"]), int(r["n_idler"]),
                ])

    @classmethod
    def from_csv(cls, path, plan: ScanPlan) -> "RawDataset":
        kinds = {v: k for k, v in KIND_NAMES.items()}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            data = list(reader)
        rows = np.zeros(len(data), dtype=RAW_DTYPE)
        try:
            for i, d in enumerate(data):
                rows[i] = (
                    kinds[d["kind"]], int(d["plane"]), int(d["ix"]), int(d["iy"]), int(d["window"]),
                    float(d["wavelength_nm"]), float(d["t_start_s"]), float(d["duration_s"]),
                    int(d["n_signal"]), int(d["n_idler"]),
                )
        except (KeyError, ValueError) as exc:
            raise AssemblyError(f"{path}: malformed raw-count row ({exc})") from None
        return cls(rows, plan)


def drift_correct(pixel_counts, pre_ref: float, post_ref: float, pixel_times, ref_times=(0.0, 1.0)):
    """Divide counts by the reference level linearly interpolated to each pixel's time.

    `ref_times` are the acquisition times of the pre and post references;
    by default `pixel_times` are read as fractions of the way from pre to
    post.
    """
    if not (pre_ref > 0 and post_ref > 0):
        raise DriftReferenceError(f"non-positive reference level (pre={pre_ref}, post={post_ref})")
    t = np.asarray(pixel_times, dtype=np.float64)
    t_pre, t_post = ref_times
    if t_post == t_pre:
        ref = np.full_like(t, 0.5 * (pre_ref + post_ref))
    else:
        frac = (t - t_pre) / (t_post - t_pre)
        ref = pre_ref + (post_ref - pre_ref) * frac
    return np.asarray(pixel_counts, dtype=np.float64) / ref


@dataclass(frozen=True)
class HyperCube:
    data: np.ndarray
    mask: np.ndarray
    wavelengths_nm: np.ndarray
    plan: ScanPlan
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.data.shape != self.mask.shape:
            raise ValueError("data and mask shapes differ")
        if self.data.shape != (self.plan.nx, self.plan.ny, self.plan.n_planes):
            raise ValueError("cube dimensions do not match the scan plan")
        if not np.all(np.isfinite(self.data[self.mask])):
            raise ValueError("non-finite transmission at a valid pixel")
        object.__setattr__(self, "wavelengths_nm", np.asarray(self.wavelengths_nm, dtype=np.float64))

    @property
    def shape(self):
        return self.data.shape

    def plane_index(self, wavelength_nm: float) -> int:
        wl = self.wavelengths_nm
        k = int(np.argmin(np.abs(wl - wavelength_nm)))
        tol = 0.5 * float(np.min(np.diff(wl))) if wl.size > 1 else 1e-6
        if abs(wl[k] - wavelength_nm) > tol:
            raise KeyError(f"no plane within {tol:g} nm of {wavelength_nm} nm")
        return k

    def plane(self, wavelength_nm: float) -> np.ma.MaskedArray:
        k = self.plane_index(wavelength_nm)
        return np.ma.masked_array(self.data[:, :, k], mask=~self.mask[:, :, k])

    def to_directory(self, path) -> None:
        """Write manifest.json, one CSV per plane and reference.csv."""
        os.makedirs(path, exist_ok=True)
        planes = []
        for k in range(self.data.shape[2]):
            name = f"plane_{k:03d}.csv"
            planes.append(name)
            with open(os.path.join(path, name), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["ix", "iy", "transmission"])
                for ix in range(self.data.shape[0]):
                    for iy in range(self.data.shape[1]):
                        v = repr(float(self.data[ix, iy, k])) if self.mask[ix, iy, k] else ""
                        w.writerow([ix, iy, v])
        refs = self.provenance.get("references", [])
        with open(os.path.join(path, "reference.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["plane", "wavelength_nm", "pre_ref", "post_ref", "t_pre_s", "t_post_s"])
            for r in refs:
                w.writerow([r["plane"], repr(r["wavelength_nm"]), repr(r["pre_ref"]), repr(r["post_ref"]),
                            repr(r["t_pre_s"]), repr(r["t_post_s"])])
        masked_planes = [k for k in range(self.data.shape[2]) if not self.mask[:, :, k].any()]
        manifest = {
            "format": "hyperspec-cube",
            "version": 1,
            "shape": list(self.data.shape),
            "wavelengths_nm": [float(w) for w in self.wavelengths_nm],
            "plan": self.plan.to_dict(),
            "calibration": self.provenance.get("calibration"),
            "use_rescaling": self.provenance.get("use_rescaling", False),
            "mask_summary": {
                "valid": int(self.mask.sum()),
                "masked": int((~self.mask).sum()),
                "masked_planes": masked_planes,
            },
            "planes": planes,
            "reference_file": "reference.csv",
        }
        with open(os.path.join(path, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_directory(cls, path) -> "HyperCube":
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
        plan = build_scan_plan(manifest["plan"])
        nx, ny, nw = manifest["shape"]
        data = np.full((nx, ny, nw), np.nan)
        mask = np.zeros((nx, ny, nw), dtype=bool)
        for k, name in enumerate(manifest["planes"]):
            with open(os.path.join(path, name), newline="") as fh:
                for row in csv.DictReader(fh):
                    if row["transmission"] != "":
                        ix, iy = int(row["ix"]), int(row["iy"])
                        data[ix, iy, k] = float(row["transmission"])
                        mask[ix, iy, k] = True
        refs = []
        ref_path = os.path.join(path, manifest.get("reference_file", "reference.csv"))
        if os.path.exists(ref_path):
            with open(ref_path, newline="") as fh:
                for row in csv.DictReader(fh):
                    refs.append({"plane": int(row["plane"]), **{k: float(row[k]) for k in row if k != "plane"}})
        prov = {"calibration": manifest.get("calibration"), "use_rescaling": manifest.get("use_rescaling", False),
                "references": refs}
        return cls(data, mask, np.array(manifest["wavelengths_nm"]), plan, prov)


def _point_values(ns: np.ndarray, ni: np.ndarray, use_rescaling: bool):
    """Per-point idler level from a (points, windows) block of counts."""
    if use_rescaling:
        return rescale_batches(ns, ni)
    return ni.mean(axis=1).astype(np.float64), np.ones(ni.shape[0], dtype=bool)


def assemble_cube(raw: RawDataset, calibration: CalibrationModel | None = None,
                  use_rescaling: bool = False) -> HyperCube:
    """Normalised transmission cube from raw counts.

    Per plane, each point's idler level is its mean window count (optionally
    signal-rescaled within the point's windows). Pixel levels are divided by
    the reference level interpolated in time between the pre and post
    reference batches. Planes whose references are not positive are masked.
    """
    plan = raw.plan
    nx, ny, nw, wpp = plan.nx, plan.ny, plan.n_planes, plan.windows_per_pixel
    n_ref = plan.reference_points_per_plane
    rows = raw.rows
    # canonical order makes the result independent of record order
    rows = rows[np.lexsort((rows["window"], rows["iy"], rows["ix"], rows["kind"], rows["plane"]))]

    gaps = []
    data = np.full((nx, ny, nw), np.nan)
    mask = np.zeros((nx, ny, nw), dtype=bool)
    refs = []
    plane_of = rows["plane"]
    bounds = np.searchsorted(plane_of, np.arange(nw + 1))
    for k in range(nw):
        pr = rows[bounds[k]:bounds[k + 1]]
        if pr.size == 0:
            gaps.append(f"plane {k} ({plan.wavelengths_nm[k]} nm) missing")
            continue
        blocks = {}
        for kind, n_points in ((PIXEL, nx * ny), (PRE_REF, n_ref), (POST_REF, n_ref)):
            sub = pr[pr["kind"] == kind]
            if sub.size != n_points * wpp:
                gaps.append(f"plane {k}: {KIND_NAMES[kind]} has {sub.size} windows, expected {n_points * wpp}")
                continue
            shape = (n_points, wpp)
            blocks[kind] = (
                sub["n_signal"].reshape(shape), sub["n_idler"].reshape(shape),
                (sub["t_start_s"] + 0.5 * sub["duration_s"]).reshape(shape).mean(axis=1),
                sub["ix"].reshape(shape)[:, 0], sub["iy"].reshape(shape)[:, 0],
            )
        if len(blocks) < 3:
            continue
        ns, ni, t_pix, ixs, iys = blocks[PIXEL]
        if np.any(ixs != np.repeat(np.arange(nx), ny)) or np.any(iys != np.tile(np.arange(ny), nx)):
            gaps.append(f"plane {k}: pixel grid incomplete or duplicated")
            continue
        values, valid = _point_values(ns, ni, use_rescaling)
        levels = {}
        for kind in (PRE_REF, POST_REF):
            rns, rni, rt, _, _ = blocks[kind]
            rv, rok = _point_values(rns, rni, use_rescaling)
            levels[kind] = (float(rv[rok].mean()) if rok.any() else 0.0, float(rt.mean()))
        (pre, t_pre), (post, t_post) = levels[PRE_REF], levels[POST_REF]
        refs.append({"plane": k, "wavelength_nm": float(plan.wavelengths_nm[k]),
                     "pre_ref": pre, "post_ref": post, "t_pre_s": t_pre, "t_post_s": t_post})
        try:
            corrected = drift_correct(values, pre, post, t_pix, (t_pre, t_post))
        except DriftReferenceError:
            continue  # plane stays masked
        ok = valid & np.isfinite(corrected)
        data[:, :, k] = np.where(ok, corrected, np.nan).reshape(nx, ny)
        mask[:, :, k] = ok.reshape(nx, ny)
    if gaps:
        raise AssemblyError("; ".join(gaps))

    wavelengths = np.asarray(plan.wavelengths_nm, dtype=np.float64)
    cal_info = None
    if calibration is not None:
        wavelengths = calibration.map(wavelengths)
        cal_info = {"a": calibration.a, "b": calibration.b, "R": calibration.R}
    prov = {"calibration": cal_info, "use_rescaling": bool(use_rescaling), "references": refs}
    return HyperCube(data, mask, wavelengths, plan, prov)


@dataclass(frozen=True)
class ContrastImage:
    values: np.ma.MaskedArray
    lambda_a_nm: float
    lambda_b_nm: float
    mode: str = "difference"

    def to_csv(self, path) -> None:
        """Grid CSV: one row per ix, one column per iy, masked pixels empty."""
        v = self.values
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ix\\iy"] + list(range(v.shape[1])))
            for ix in range(v.shape[0]):
                w.writerow([ix] + ["" if v.mask[ix, iy] else repr(float(v.data[ix, iy])) for iy in range(v.shape[1])])


def contrast_image(cube: HyperCube, lambda_a_nm: float, lambda_b_nm: float, mode: str = "difference") -> ContrastImage:
    """Per-pixel comparison of two planes, ``T(a) - T(b)`` or ``T(a) / T(b)``."""
    if mode not in ("difference", "ratio"):
        raise ValueError(f"unknown contrast mode {mode!r}")
    ta = cube.plane(lambda_a_nm)
    tb = cube.plane(lambda_b_nm)
    if mode == "difference":
        vals = ta - tb
    else:
        low = np.ma.getmaskarray(tb) | (tb.filled(0.0) < RATIO_FLOOR)
        safe = np.where(low, 1.0, tb.filled(1.0))
        vals = np.ma.masked_array(ta.filled(np.nan) / safe, mask=np.ma.getmaskarray(ta) | low)
    vals = np.ma.masked_array(vals.filled(np.nan), mask=np.ma.getmaskarray(vals))
    return ContrastImage(vals, float(lambda_a_nm), float(lambda_b_nm), mode)


def region_mask(cube: HyperCube, region) -> np.ndarray:
    nx, ny = cube.shape[:2]
    if isinstance(region, np.ndarray) and region.dtype == bool:
        if region.shape != (nx, ny):
            raise ValueError("region mask shape does not match the cube")
        sel = region
    else:
        sel = np.zeros((nx, ny), dtype=bool)
        sel[region] = True
    if not sel.any():
        raise ValueError("empty region")
    return sel


def extract_spectrum(cube: HyperCube, region) -> TransmissionSpectrum:
    """Mean transmission over the unmasked pixels of `region`, plane by plane.

    `region` is a boolean (nx, ny) mask or anything that indexes one, e.g.
    ``np.s_[2:5, 0:3]``. Uncertainty is the standard error of the mean (NaN
    for single-pixel planes). Planes with no valid pixel are left out.
    """
    sel = region_mask(cube, region)
    wl, mean, se = [], [], []
    for k in range(cube.shape[2]):
        v = cube.data[:, :, k][sel & cube.mask[:, :, k]]
        if v.size == 0:
            continue
        wl.append(cube.wavelengths_nm[k])
        mean.append(float(v.mean()))
        se.append(float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan"))
    if not wl:
        raise ValueError("region has no valid pixels in any plane")
    return TransmissionSpectrum(np.array(wl), np.array(mean), np.array(se), source="single-photon")
