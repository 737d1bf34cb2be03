"""``hyperspec <subcommand> --config FILE [--seed N] [--out DIR]``

Subcommands chain through the output directory: each one reads its inputs
from the paths in the config file, falling back to what the previous step
wrote under ``--out``.

Exit status is 0 on success, 2 for configuration errors and 3 for data
errors; failures print one line ``hyperspec: error kind=... reason="..."``
to stderr.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import os
import re
import sys
from collections import defaultdict
from dataclasses import dataclass, field, fields

import numpy as np

from . import acceptance, calibration as cal, correlation as cor, gating, synthetic, timetag
from .experiment import ExperimentSettings, run_experiment
from .hypercube import (
    AssemblyError, HyperCube, RawDataset, ScanConfigError, assemble_cube, build_scan_plan,
    contrast_image, extract_spectrum,
)
from .sim import ConfigError, Phantom, SourceConfig, simulate_scan, simulate_stream, simulate_windows

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger("hyperspec")

SUBCOMMANDS = ("simulate", "gate", "correlate", "calibrate", "cube", "contrast", "spectrum", "demo")
EXIT_CONFIG, EXIT_DATA = 2, 3


class CliConfigError(ValueError):
    pass


CONFIG_ERRORS = (CliConfigError, ConfigError, ScanConfigError, gating.GateConfigError, FileNotFoundError,
                 tomllib.TOMLDecodeError)
DATA_ERRORS = (
    timetag.StreamFormatError, timetag.DeadTriggerError, gating.NoPhotonsError,
    cor.InsufficientDataError, cor.DegenerateFitError, cal.CalibrationDataError, cal.ExtrapolationError,
    cal.NonConvergenceError, AssemblyError, KeyError, ValueError,
)


@dataclass
class PipelineConfig:
    out: str
    seed: int | None
    base_dir: str = "."
    sections: dict = field(default_factory=dict)

    def section(self, name: str) -> dict:
        return dict(self.sections.get(name, {}))

    def input_path(self, section: str, key: str, default: str | None) -> str:
        """Configured path (relative to the config file) or `default` under --out; must exist."""
        value = self.sections.get(section, {}).get(key)
        path = os.path.join(self.base_dir, value) if value else (os.path.join(self.out, default) if default else None)
        if path is None:
            raise CliConfigError(f"[{section}] {key} is required")
        if not os.path.exists(path):
            raise FileNotFoundError(f"input not found: {path}")
        return path

    def require_seed(self) -> int:
        if self.seed is None:
            raise CliConfigError("a seed is required (--seed or top-level seed in the config)")
        return self.seed


def load_config(path: str | None, out: str, seed: int | None) -> PipelineConfig:
    sections: dict = {}
    base = "."
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            sections = tomllib.load(fh)
        base = os.path.dirname(os.path.abspath(path))
    if seed is None and "seed" in sections:
        seed = int(sections["seed"])
    return PipelineConfig(out=out, seed=seed, base_dir=base, sections=sections)


def _write_manifest(cfg: PipelineConfig, name: str, outputs: list[str], **extra) -> None:
    rel = sorted(os.path.relpath(p, cfg.out) for p in outputs)
    doc = {"subcommand": name, "seed": cfg.seed, "config": cfg.sections, "outputs": rel, **extra}
    with open(os.path.join(cfg.out, f"{name}_manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _source(cfg: PipelineConfig) -> SourceConfig:
    return SourceConfig.from_mapping(cfg.section("source"))


def _plan(cfg: PipelineConfig):
    return build_scan_plan(cfg.section("scan"))


def _settings(cfg: PipelineConfig) -> ExperimentSettings:
    d = cfg.section("demo")
    names = {f.name for f in fields(ExperimentSettings)}
    unknown = set(d) - names
    if unknown:
        raise CliConfigError(f"unknown demo keys: {sorted(unknown)}")
    for k in ("wavelengths_nm", "true_axis", "contrast_nm"):
        if k in d:
            d[k] = tuple(float(v) for v in d[k])
    return ExperimentSettings(**d)


def _write_windows_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "window", "wavelength_nm", "window_duration_s", "n_signal", "n_idler"])
        for group, k, wc in rows:
            w.writerow([group, k, repr(float(wc.wavelength_nm)), repr(float(wc.window_duration_s)),
                        wc.n_signal, wc.n_idler])


def _read_windows_csv(path) -> dict[str, list]:
    groups = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                groups[row["group"]].append(cor.WindowCounts(
                    int(row["n_signal"]), int(row["n_idler"]), float(row["window_duration_s"]),
                    float(row["wavelength_nm"]),
                ))
            except (KeyError, ValueError) as exc:
                raise cal.CalibrationDataError(f"{path}: malformed window row ({exc})") from None
    return dict(groups)


# --- subcommands ------------------------------------------------------------


def cmd_simulate(cfg: PipelineConfig) -> None:
    seed = cfg.require_seed()
    source = _source(cfg)
    plan = _plan(cfg)
    opts = cfg.section("simulate")
    ph = cfg.section("phantom")
    outputs = []

    settings = ExperimentSettings()
    axis = cal.CalibrationModel(*ph.get("axis", settings.true_axis))
    curve_a = synthetic.absorption_curve(synthetic.POLYSTYRENE_BANDS)
    curve_b = synthetic.absorption_curve(synthetic.POLYETHYLENE_BANDS)
    if "file" in ph:
        phantom = Phantom(read_phantom_csv(cfg.input_path("phantom", "file", None)))
    elif ph.get("builtin", "two-material") == "two-material":
        mapping, _, _ = synthetic.two_material_phantom(plan.nx, plan.ny, plan.wavelengths_nm, axis, curve_a, curve_b)
        phantom = Phantom(mapping)
        path = os.path.join(cfg.out, "phantom.csv")
        write_phantom_csv(path, mapping)
        outputs.append(path)
    elif ph["builtin"] == "flat":
        level = float(ph.get("transmission", 1.0))
        phantom = Phantom(lambda ix, iy, wl: level)
    else:
        raise CliConfigError(f"unknown phantom builtin {ph['builtin']!r}")

    raw = simulate_scan(source, phantom, plan, float(ph.get("drift_slope_per_s", 0.0)), seed,
                        workers=int(opts.get("workers", 1)))
    path = os.path.join(cfg.out, "raw_counts.csv")
    raw.to_csv(path)
    outputs.append(path)

    stream_dir = os.path.join(cfg.out, "streams")
    os.makedirs(stream_dir, exist_ok=True)
    duration = float(opts.get("stream_duration_s", 10.0))
    trans = float(opts.get("stream_transmission", 1.0))
    window_rows = []
    n_windows = int(opts.get("source_windows", 500))
    for k, wl in enumerate(opts.get("stream_wavelengths_nm", [3000.0])):
        blob = simulate_stream(source, trans, float(wl), duration, _subseed(seed, 2, k))
        path = os.path.join(stream_dir, f"stream_{float(wl):g}nm.ttg")
        with open(path, "wb") as fh:
            fh.write(blob)
        outputs.append(path)
        for j, wc in enumerate(simulate_windows(source, trans, float(wl), n_windows, _subseed(seed, 3, k))):
            window_rows.append((f"{float(wl):g}nm", j, wc))
    path = os.path.join(cfg.out, "source_windows.csv")
    _write_windows_csv(path, window_rows)
    outputs.append(path)

    lam = synthetic.nominal_axis(float(opts.get("calibration_start_nm", 2900.0)),
                                 float(opts.get("calibration_step_nm", 7.0)),
                                 int(opts.get("calibration_points", 100)))
    counts = opts.get("calibration_counts", 1e4)
    s, r = synthetic.calibration_counts(curve_a, axis, lam, float(counts), _subseed(seed, 4))
    p1, p2 = os.path.join(cfg.out, "ftir_reference.csv"), os.path.join(cfg.out, "calibration_counts.csv")
    cal.write_ftir_csv(p1, synthetic.ftir_spectrum(curve_a))
    cal.write_counts_csv(p2, lam, s, r)
    outputs += [p1, p2]
    with open(os.path.join(cfg.out, "plan.json"), "w") as fh:
        json.dump(plan.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append(os.path.join(cfg.out, "plan.json"))
    _write_manifest(cfg, "simulate", outputs)


def _subseed(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=key)


def cmd_gate(cfg: PipelineConfig) -> None:
    opts = cfg.section("gate")
    if "streams" in opts:
        paths = [os.path.join(cfg.base_dir, p) for p in opts["streams"]]
    else:
        paths = sorted(glob.glob(os.path.join(cfg.out, "streams", "*.ttg")))
    if not paths:
        raise CliConfigError("no .ttg streams configured or found under --out/streams")
    for p in paths:
        if not os.path.exists(p):
            raise FileNotFoundError(f"input not found: {p}")
    width = int(round(float(opts.get("width_ns", 150.0)) * 1000))
    bin_ps = int(round(float(opts.get("bin_width_ns", 1.0)) * 1000))
    window_s = float(opts.get("window_duration_s", 2.0))
    outputs, rows, gates = [], [], {}
    for p in paths:
        name = os.path.splitext(os.path.basename(p))[0]
        m = re.search(r"_([0-9.]+)nm$", name)
        wl = float(m.group(1)) if m else float("nan")
        header, recs = timetag.read_stream(p)
        cycles = timetag.split_by_trigger(recs, header.pulse_period_ps)
        chosen = {}
        for ch, label in ((timetag.SIGNAL, "signal"), (timetag.IDLER, "idler")):
            hist = gating.build_histogram(cycles, ch, bin_ps)
            hp = os.path.join(cfg.out, f"hist_{name}_{label}.csv")
            hist.to_csv(hp)
            outputs.append(hp)
            start_key = f"{label}_start_ns"
            if start_key in opts:
                chosen[label] = gating.GateWindow(int(round(float(opts[start_key]) * 1000)), width)
            else:
                chosen[label] = gating.auto_gate(hist, width)
        res = gating.gated_counts(cycles, chosen["signal"], chosen["idler"], window_s, wavelength_nm=wl)
        gates[name] = {
            "signal": {"start_ps": chosen["signal"].start_ps, "width_ps": width},
            "idler": {"start_ps": chosen["idler"].start_ps, "width_ps": width},
            "cycles": len(cycles), "discarded_events": cycles.discarded_count,
            "windows": len(res), "dropped_partial_cycles": res.dropped_cycles,
        }
        rows += [(name, k, wc) for k, wc in enumerate(res)]
    path = os.path.join(cfg.out, "windows.csv")
    _write_windows_csv(path, rows)
    gp = os.path.join(cfg.out, "gates.json")
    with open(gp, "w") as fh:
        json.dump(gates, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(cfg, "gate", outputs + [path, gp])


def cmd_correlate(cfg: PipelineConfig) -> None:
    groups = _read_windows_csv(cfg.input_path("correlate", "windows", "windows.csv"))
    stats, fits, resc_rows = [], {}, []
    for name in sorted(groups):
        w = groups[name]
        st = cor.noise_stats(w)
        stats.append(st)
        entry = {"raw_ratio": st.raw_ratio, "rescaled_ratio": st.rescaled_ratio}
        if len(w) >= 3:
            try:
                f = cor.correlation_fit(w)
                entry.update(slope=f.slope, intercept=f.intercept, pearson_r=f.pearson_r)
            except cor.DegenerateFitError as exc:
                entry["fit_error"] = str(exc)
        if len(w) >= 10:
            n_i = np.array([x.n_idler for x in w], dtype=float)
            entry.update(fwhm_raw=cor.fwhm(n_i), fwhm_rescaled=cor.fwhm(cor.rescale_idler(w).values))
        fits[name] = entry
        r = cor.rescale_idler(w)
        resc_rows += [(name, int(i), float(v)) for i, v in zip(r.retained, r.values)]
    sp = os.path.join(cfg.out, "stats.csv")
    cor.write_stats_csv(sp, stats)
    fp = os.path.join(cfg.out, "correlation.json")
    with open(fp, "w") as fh:
        json.dump(fits, fh, indent=2, sort_keys=True)
        fh.write("\n")
    rp = os.path.join(cfg.out, "rescaled.csv")
    with open(rp, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["group", "window", "rescaled_idler"])
        for row in resc_rows:
            wr.writerow([row[0], row[1], repr(row[2])])
    _write_manifest(cfg, "correlate", [sp, fp, rp])


def cmd_calibrate(cfg: PipelineConfig) -> None:
    ftir = cal.read_ftir_csv(cfg.input_path("calibrate", "ftir", "ftir_reference.csv"))
    measured = cal.read_counts_csv(cfg.input_path("calibrate", "spectrum", "calibration_counts.csv"))
    fit = cal.fit_calibration(measured, ftir)
    mp = os.path.join(cfg.out, "calibration.json")
    fit.model.to_json(mp, residual_rms=fit.residual_rms, iterations=fit.iterations)
    sp = os.path.join(cfg.out, "calibrated_spectrum.csv")
    cal.apply_calibration(fit.model, measured).to_csv(sp)
    _write_manifest(cfg, "calibrate", [mp, sp])


def cmd_cube(cfg: PipelineConfig) -> None:
    opts = cfg.section("cube")
    plan = _plan(cfg)
    raw = RawDataset.from_csv(cfg.input_path("cube", "raw", "raw_counts.csv"), plan)
    model = None
    if opts.get("calibration") or os.path.exists(os.path.join(cfg.out, "calibration.json")):
        model = cal.CalibrationModel.from_json(cfg.input_path("cube", "calibration", "calibration.json"))
    cube = assemble_cube(raw, model, use_rescaling=bool(opts.get("use_rescaling", True)))
    d = os.path.join(cfg.out, "cube")
    cube.to_directory(d)
    _write_manifest(cfg, "cube", [os.path.join(d, "manifest.json")])


def _load_cube(cfg: PipelineConfig, section: str) -> HyperCube:
    return HyperCube.from_directory(cfg.input_path(section, "cube", "cube"))


def cmd_contrast(cfg: PipelineConfig) -> None:
    opts = cfg.section("contrast")
    cube = _load_cube(cfg, "contrast")
    try:
        la, lb = float(opts["lambda_a_nm"]), float(opts["lambda_b_nm"])
    except KeyError as exc:
        raise CliConfigError(f"[contrast] {exc.args[0]} is required") from None
    mode = opts.get("mode", "difference")
    if mode not in ("difference", "ratio"):
        raise CliConfigError(f"unknown contrast mode {mode!r}")
    img = contrast_image(cube, la, lb, mode)
    p = os.path.join(cfg.out, f"contrast_{mode}_{la:g}_{lb:g}.csv")
    img.to_csv(p)
    _write_manifest(cfg, "contrast", [p])


def cmd_spectrum(cfg: PipelineConfig) -> None:
    opts = cfg.section("spectrum")
    cube = _load_cube(cfg, "spectrum")
    nx, ny = cube.shape[:2]
    x0, x1, y0, y1 = opts.get("region", [0, nx, 0, ny])
    if not (0 <= x0 < x1 <= nx and 0 <= y0 < y1 <= ny):
        raise CliConfigError(f"region {[x0, x1, y0, y1]} outside the {nx}x{ny} grid")
    spectrum = extract_spectrum(cube, np.s_[x0:x1, y0:y1])
    p = os.path.join(cfg.out, "spectrum.csv")
    spectrum.to_csv(p)
    _write_manifest(cfg, "spectrum", [p])


def cmd_demo(cfg: PipelineConfig) -> None:
    seed = cfg.seed if cfg.seed is not None else 7
    settings = _settings(cfg)
    result = run_experiment(seed, settings)
    d = os.path.join(cfg.out, "cube")
    result.cube.to_directory(d)
    crit = acceptance.run_all()
    rp = os.path.join(cfg.out, "report.csv")
    with open(rp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["criterion", "name", "check", "value", "target", "passed"])
        for c in crit:
            for chk in c.checks:
                w.writerow([c.number, c.name, chk.label, repr(chk.value), chk.target, chk.passed])
    jp = os.path.join(cfg.out, "report.json")
    with open(jp, "w") as fh:
        json.dump({
            "seed": seed,
            "experiment": result.metrics,
            "criteria": [{"number": c.number, "name": c.name, "passed": all(k.passed for k in c.checks),
                          "checks": [vars(k) for k in c.checks]} for c in crit],
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    # wall-clock times vary run to run, so they live apart from the report
    tp = os.path.join(cfg.out, "timing.json")
    with open(tp, "w") as fh:
        json.dump({str(c.number): {"runtime_s": round(c.runtime_s, 3), "limit_s": c.runtime_limit_s} for c in crit},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    for c in crit:
        print(c.line())
    _write_manifest(cfg, "demo", [rp, jp, tp, os.path.join(d, "manifest.json")])


COMMANDS = {
    "simulate": cmd_simulate, "gate": cmd_gate, "correlate": cmd_correlate, "calibrate": cmd_calibrate,
    "cube": cmd_cube, "contrast": cmd_contrast, "spectrum": cmd_spectrum, "demo": cmd_demo,
}


# --- phantom files ----------------------------------------------------------


def read_phantom_csv(path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                out[(int(row["ix"]), int(row["iy"]), float(row["wavelength_nm"]))] = float(row["transmission"])
            except (KeyError, ValueError) as exc:
                raise cal.CalibrationDataError(f"{path}: malformed phantom row ({exc})") from None
    return out


def write_phantom_csv(path, mapping) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ix", "iy", "wavelength_nm", "transmission"])
        for (ix, iy, wl), t in sorted(mapping.items()):
            w.writerow([ix, iy, repr(float(wl)), repr(float(t))])


# --- entry point ------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _fail("config", EXIT_CONFIG, message)


def _fail(kind: str, code: int, reason: str):
    reason = " ".join(str(reason).split()).replace('"', "'")
    print(f'hyperspec: error kind={kind} code={code} reason="{reason}"', file=sys.stderr)
    sys.exit(code)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hyperspec", description="Single-photon MIR hyperspectral imaging pipeline.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--seed", type=int, help="master RNG seed (overrides the config)")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.out, args.seed)
        os.makedirs(cfg.out, exist_ok=True)
        COMMANDS[args.subcommand](cfg)
    except CONFIG_ERRORS as exc:
        _fail("config", EXIT_CONFIG, exc)
    except DATA_ERRORS as exc:
        _fail("data", EXIT_DATA, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
