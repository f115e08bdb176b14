"""Command-line entry point: ``pepsim {simulate,analyze,gains,project,solid-angle}``."""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from pathlib import Path

from . import __version__, analysis, config as cfg, geometry, pipeline
from .analysis import Spectrum
from .simulate import CSV_HEADER, EventTable, run_factors, simulate_run

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2

EVENTS_ON = "events_current.csv"
EVENTS_OFF = "events_nocurrent.csv"
SPECTRUM_ON = "spectrum_current.csv"
SPECTRUM_OFF = "spectrum_nocurrent.csv"
REPORT = "run_report.json"
TIMING = "timing.json"


def dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_all(files: dict[Path, str]) -> None:
    """Write every file or none of them."""
    done = []
    try:
        for path, text in files.items():
            write_atomic(path, text)
            done.append(path)
    except BaseException:
        for path in done:
            path.unlink(missing_ok=True)
        raise


def load_config(path=None, preset=None, seed=None, samples=None) -> cfg.ExperimentConfig:
    if path is not None:
        config = cfg.load(path)
    else:
        config = cfg.preset(preset or "vip2-2016")
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if samples is not None:
        overrides["analysis"] = {"acceptance_samples": samples}
    if overrides:
        config = cfg.from_dict(cfg.deep_merge(config.to_dict(), overrides))
    return config


# ---------------------------------------------------------------- commands


def cmd_simulate(config: cfg.ExperimentConfig, out_dir, workers: int | None = None) -> dict:
    """Simulate both periods, analyse them and write events, spectra and a RunReport."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    events_on, events_off = simulate_run(config, workers)
    t1 = time.perf_counter()
    spec_on, spec_off = pipeline.spectra(config, events_on, events_off)
    plan = config.run
    # A limit needs exposure in both periods and a non-zero electron budget.
    defined = plan.duration_current > 0 and plan.duration_nocurrent > 0 and plan.current > 0
    limit = pipeline.limit_from_spectra(config, spec_on, spec_off) if defined else None
    acceptance = run_factors(config)[0]
    t2 = time.perf_counter()

    report = {
        "tool": "pepsim",
        "version": __version__,
        "config": config.to_dict(),
        "files": {
            "events_current": EVENTS_ON,
            "events_nocurrent": EVENTS_OFF,
            "spectrum_current": SPECTRUM_ON,
            "spectrum_nocurrent": SPECTRUM_OFF,
            "timing": TIMING,
        },
        "counts": {
            "events_current": len(events_on),
            "events_nocurrent": len(events_off),
            "roi_current": spec_on.roi_counts(config.analysis.roi),
            "roi_nocurrent": spec_off.roi_counts(config.analysis.roi),
        },
        "acceptance": acceptance.to_dict(),
        "limit": limit.to_dict() if limit else None,
    }
    # Wall-clock numbers live in their own file so the report stays reproducible.
    timing = {"simulate_s": t1 - t0, "analyze_s": t2 - t1}
    write_all(
        {
            out / EVENTS_ON: events_on.to_csv(),
            out / EVENTS_OFF: events_off.to_csv(),
            out / SPECTRUM_ON: spec_on.to_csv(),
            out / SPECTRUM_OFF: spec_off.to_csv(),
            out / REPORT: dumps(report),
            out / TIMING: dumps(timing),
        }
    )
    return report


def _read_spectrum(path: Path, config, exposure) -> Spectrum:
    text = Path(path).read_text(encoding="utf-8")
    first = text.split("\n", 1)[0].strip()
    area = config.layout().detector_area_cm2
    if first == ",".join(CSV_HEADER):
        events = EventTable.from_csv(text)
        return analysis.histogram(events, config.analysis.bin_edges, config.analysis.include_vetoed, exposure, area)
    if first == ",".join(analysis.SPECTRUM_HEADER):
        return Spectrum.from_csv(text, exposure, area)
    raise ValueError(f"{path}: not an event or spectrum CSV")


def cmd_analyze(events_on, events_off, config: cfg.ExperimentConfig, exposure_on=None, exposure_off=None) -> dict:
    """Histogram, subtract and convert to a beta^2/2 limit. Inputs may be event or spectrum CSVs."""
    plan = config.run
    exp_on = plan.duration_current if exposure_on is None else exposure_on
    exp_off = plan.duration_nocurrent if exposure_off is None else exposure_off
    if not exp_on or not exp_off or exp_on <= 0 or exp_off <= 0:
        raise ValueError("both periods need a positive exposure (days)")
    spec_on = _read_spectrum(events_on, config, exp_on)
    spec_off = _read_spectrum(events_off, config, exp_off)
    limit = pipeline.limit_from_spectra(config, spec_on, spec_off)
    return limit.to_dict()


def cmd_gains(variant: str) -> dict:
    if variant == "vip":
        report = analysis.gain_table_vip()
    elif variant == "upgrade":
        report = analysis.gain_table_upgrade()
    else:
        raise ValueError(f"unknown gains variant {variant!r}; use 'vip' or 'upgrade'")
    return {"variant": variant, **report.to_dict()}


def cmd_project(limit: float, gain: float, time_ratio: float) -> dict:
    projected = analysis.project_limit(limit, gain, time_ratio)
    return {"current_limit": limit, "sensitivity_gain": gain, "time_ratio": time_ratio, "projected_limit": projected}


def cmd_solid_angle(config: cfg.ExperimentConfig, n_samples: int, seed: int, energy=None, workers=None) -> dict:
    layout = config.layout()
    if energy is None:
        result = geometry.solid_angle_fraction(layout, n_samples, seed, workers)
    else:
        result = geometry.geometric_acceptance(layout, energy, n_samples, seed, workers)
    return {"preset": layout.preset_name, **result.to_dict()}


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON configuration file")
    common.add_argument("--preset", choices=sorted(cfg.PRESETS), help="compiled-in preset when no --config is given")
    common.add_argument("--seed", type=int, help="override the master seed (unsigned 64-bit)")
    common.add_argument("--samples", type=int, help="Monte Carlo samples for acceptance integration")
    common.add_argument("--out", type=Path, help="output directory (simulate) or file (other commands)")

    ap = argparse.ArgumentParser(prog="pepsim", description="PEP-violation X-ray search simulator")
    ap.add_argument("--version", action="version", version=f"pepsim {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate a run and write events, spectra, report")
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("analyze", parents=[common], help="compute a beta^2/2 limit from two event/spectrum CSVs")
    p.add_argument("events_current", type=Path)
    p.add_argument("events_nocurrent", type=Path)
    p.add_argument("--exposure-current", type=float, help="days; defaults to the config run plan")
    p.add_argument("--exposure-nocurrent", type=float, help="days; defaults to the config run plan")

    p = sub.add_parser("gains", parents=[common], help="print a gain table")
    p.add_argument("variant", choices=["vip", "upgrade"])

    p = sub.add_parser("project", parents=[common], help="scale a limit by a sensitivity gain and exposure ratio")
    p.add_argument("--limit", type=float, required=True)
    p.add_argument("--gain", type=float, required=True)
    p.add_argument("--time-ratio", type=float, required=True)

    p = sub.add_parser("solid-angle", parents=[common], help="Monte Carlo solid angle / acceptance of a layout")
    p.add_argument("--energy", type=float, help="keV; include copper attenuation at this energy")
    p.add_argument("--workers", type=int, default=None)
    return ap


def _emit(doc: dict, out: Path | None) -> None:
    text = dumps(doc)
    if out is not None:
        write_atomic(out, text)
    sys.stdout.write(text)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gains":
            _emit(cmd_gains(args.variant), args.out)
        elif args.command == "project":
            _emit(cmd_project(args.limit, args.gain, args.time_ratio), args.out)
        else:
            config = load_config(args.config, args.preset, args.seed, args.samples)
            if args.command == "simulate":
                report = cmd_simulate(config, args.out or Path("."), args.workers)
                sys.stdout.write(dumps(report["limit"]))
            elif args.command == "analyze":
                doc = cmd_analyze(
                    args.events_current, args.events_nocurrent, config, args.exposure_current, args.exposure_nocurrent
                )
                _emit(doc, args.out)
            elif args.command == "solid-angle":
                n = args.samples or 1_000_000
                seed = args.seed if args.seed is not None else config.seed
                _emit(cmd_solid_angle(config, n, seed, args.energy, args.workers), args.out)
    except cfg.ConfigError as exc:
        where = args.config if args.config else "config"
        print(f"pepsim: {where}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"pepsim: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
