"""Experiment configuration: presets, JSON loading and validation."""

from __future__ import annotations

import copy
import dataclasses
import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import geometry, physics
from .analysis import RegionOfInterest, make_bin_edges
from .geometry import GeometryLayout
from .rng import MAX_SEED, stream_key
from .simulate import BackgroundModel, DetectorResponse, Line, RunPlan, VetoModel

SCHEMA_VERSION = 1

# Electron-atom encounters while crossing the strip: strip length over the
# conduction-electron mean free path.
DEFAULT_INTERACTIONS = (geometry.STRIP_LENGTH / 10.0) / physics.ELECTRON_MFP_CU_CM

# Continuum level chosen with simulate.calibrate_continuum_rate so that the
# median background-only limit of the vip2-2016 plan is 1.4e-29.
VIP2_CONTINUUM_RATE = 27.66

_BASE = {
    "schema": SCHEMA_VERSION,
    "preset": "vip2-2016",
    "seed": 1,
    "geometry": {"preset": "vip2-2016", "strip_thickness": geometry.DEFAULT_STRIP_THICKNESS},
    "run": {"current": 100.0, "duration_current": 40.0, "duration_nocurrent": 70.0, "injected_beta2_over_2": 0.0},
    "detector": {"energy_fwhm": 150.0, "time_fwhm": 400.0, "depletion_depth": 450.0, "threshold": 1.0},
    "background": {
        "continuum_rate": VIP2_CONTINUUM_RATE,
        "lines": [
            {"energy": 8.05, "rate": 5.0, "natural_width": 2.1},
            {"energy": 8.905, "rate": 0.7, "natural_width": 2.5},
        ],
        "veto_correlated_fraction": 1.0,
        "shielding_suppression": 1.0,
        "rrs_suppression": 1.0,
        "energy_range": [1.0, 20.0],
    },
    "veto": {
        "window_halfwidth": 600.0,
        "efficiency_photon": 0.05,
        "efficiency_cosmic": 0.95,
        "accidental_rate": 0.0,
        "environment": "underground",
        "enabled": True,
    },
    "analysis": {
        "roi": [7.4, 7.9],
        "bins": [1.0, 20.0, 0.05],
        "confidence_sigma": 3.0,
        "p_capture": 0.1,
        "interactions_per_electron": DEFAULT_INTERACTIONS,
        "signal_energy": 7.70,
        "acceptance_samples": 1_000_000,
        "include_vetoed": False,
    },
}

_UPGRADE_OVERRIDES = {
    "preset": "vip2-upgrade",
    "geometry": {"preset": "vip2-upgrade"},
    "detector": {"energy_fwhm": 200.0},
    "background": {"shielding_suppression": 20.0, "rrs_suppression": 3.0},
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


PRESETS = {
    "vip2-2016": _BASE,
    "vip2-upgrade": deep_merge(_BASE, _UPGRADE_OVERRIDES),
}


class ConfigError(ValueError):
    def __init__(self, message: str, path: tuple = (), line: int | None = None):
        self.path = tuple(path)
        self.line = line
        self.message = message
        where = ".".join(str(p) for p in self.path)
        prefix = f"line {line}: " if line else ""
        super().__init__(f"{prefix}{where + ': ' if where else ''}{message}")


@dataclass(frozen=True)
class AnalysisSettings:
    roi: RegionOfInterest = RegionOfInterest()
    bins: tuple[float, float, float] = (1.0, 20.0, 0.05)
    confidence_sigma: float = 3.0
    p_capture: float = 0.1
    interactions_per_electron: float = DEFAULT_INTERACTIONS
    signal_energy: float = 7.70
    acceptance_samples: int = 1_000_000
    include_vetoed: bool = False

    def __post_init__(self):
        if self.confidence_sigma < 0:
            raise ValueError("confidence_sigma must be non-negative")
        if not 0 < self.p_capture <= 1:
            raise ValueError("p_capture must lie in (0, 1]")
        if self.interactions_per_electron <= 0:
            raise ValueError("interactions_per_electron must be positive")
        if self.acceptance_samples < 10_000:
            raise ValueError("acceptance_samples must be at least 10000")
        low, high = self.roi
        edges = self.bin_edges
        for edge in (low, high):
            if np.min(np.abs(edges - edge)) > 1e-9:
                raise ValueError(f"ROI edge {edge} is not on a bin edge")

    @property
    def capture_factor(self) -> float:
        return self.p_capture * self.interactions_per_electron

    @property
    def bin_edges(self) -> np.ndarray:
        return make_bin_edges(*self.bins)


@dataclass(frozen=True)
class ExperimentConfig:
    geometry: dict
    run: RunPlan
    detector: DetectorResponse
    background: BackgroundModel
    veto: VetoModel
    analysis: AnalysisSettings
    seed: int = 1
    preset: str = "vip2-2016"

    @cached_property
    def _layout(self) -> GeometryLayout:
        spec = self.geometry
        if "layout" in spec:
            return GeometryLayout.from_dict(spec["layout"])
        return geometry.preset(spec["preset"], strip_thickness=spec["strip_thickness"])

    def layout(self) -> GeometryLayout:
        return self._layout

    def derived_seed(self, label: str) -> int:
        return int(stream_key(self.seed, label)[0])

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return from_dict(deep_merge(self.to_dict(), {"seed": seed}))

    def to_dict(self) -> dict:
        bg = self.background
        return {
            "schema": SCHEMA_VERSION,
            "preset": self.preset,
            "seed": self.seed,
            "geometry": copy.deepcopy(self.geometry),
            "run": {
                "current": self.run.current,
                "duration_current": self.run.duration_current,
                "duration_nocurrent": self.run.duration_nocurrent,
                "injected_beta2_over_2": self.run.injected_beta2_over_2,
            },
            "detector": dataclasses.asdict(self.detector),
            "background": {
                "continuum_rate": bg.continuum_rate,
                "lines": [dataclasses.asdict(l) for l in bg.lines],
                "veto_correlated_fraction": bg.veto_correlated_fraction,
                "shielding_suppression": bg.shielding_suppression,
                "rrs_suppression": bg.rrs_suppression,
                "energy_range": list(bg.energy_range),
            },
            "veto": dataclasses.asdict(self.veto),
            "analysis": {
                "roi": [self.analysis.roi.low, self.analysis.roi.high],
                "bins": list(self.analysis.bins),
                "confidence_sigma": self.analysis.confidence_sigma,
                "p_capture": self.analysis.p_capture,
                "interactions_per_electron": self.analysis.interactions_per_electron,
                "signal_energy": self.analysis.signal_energy,
                "acceptance_samples": self.analysis.acceptance_samples,
                "include_vetoed": self.analysis.include_vetoed,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------------------ parsing

_SECTION_KEYS = {
    "geometry": {"preset", "strip_thickness", "layout"},
    "run": {"current", "duration_current", "duration_nocurrent", "injected_beta2_over_2"},
    "detector": {f.name for f in dataclasses.fields(DetectorResponse)},
    "background": {
        "continuum_rate", "lines", "veto_correlated_fraction", "shielding_suppression", "rrs_suppression", "energy_range",
    },
    "veto": {f.name for f in dataclasses.fields(VetoModel)},
    "analysis": {f.name for f in dataclasses.fields(AnalysisSettings)},
}
_BOOLEAN = {"enabled", "include_vetoed"}
_NON_NUMERIC = {"environment", "acceptance_samples", *_BOOLEAN}
_TOP_KEYS = {"schema", "preset", "seed", *_SECTION_KEYS}


def _number(value, path, *, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", path)
    if integer and (not float(value).is_integer()):
        raise ConfigError(f"expected an integer, got {value!r}", path)
    return int(value) if integer else float(value)


def _build(cls, section: dict, path: tuple, convert=None):
    kwargs = {}
    for key, value in section.items():
        kwargs[key] = convert(key, value) if convert else value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), path) from None


def from_dict(doc: dict) -> ExperimentConfig:
    """Validate a configuration document, filling unspecified fields from its preset."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    schema = doc.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema {schema!r} (expected {SCHEMA_VERSION})", ("schema",))
    preset_name = doc.get("preset", "vip2-2016")
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}", ("preset",))
    for key in doc:
        if key not in _TOP_KEYS:
            raise ConfigError("unknown key", (key,))
    for section, allowed in _SECTION_KEYS.items():
        if section in doc:
            if not isinstance(doc[section], dict):
                raise ConfigError("expected an object", (section,))
            for key in doc[section]:
                if key not in allowed:
                    raise ConfigError("unknown key", (section, key))
    merged = deep_merge(PRESETS[preset_name], doc)
    if "layout" in doc.get("geometry", {}):
        merged["geometry"] = {"layout": doc["geometry"]["layout"]}

    seed = _number(merged["seed"], ("seed",), integer=True)
    if not 0 <= seed <= MAX_SEED:
        raise ConfigError("seed must be an unsigned 64-bit integer", ("seed",))

    geo = merged["geometry"]
    if "layout" in geo:
        try:
            GeometryLayout.from_dict(geo["layout"])
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"invalid layout: {exc}", ("geometry", "layout")) from None
    else:
        if geo.get("preset") not in geometry.PRESETS:
            raise ConfigError(f"unknown geometry preset {geo.get('preset')!r}", ("geometry", "preset"))
        geo["strip_thickness"] = _number(geo["strip_thickness"], ("geometry", "strip_thickness"))
        if geo["strip_thickness"] <= 0:
            raise ConfigError("strip_thickness must be positive", ("geometry", "strip_thickness"))

    def numeric(section):
        def convert(key, value):
            if key in _BOOLEAN and not isinstance(value, bool):
                raise ConfigError(f"expected true or false, got {value!r}", (section, key))
            if key in _NON_NUMERIC or isinstance(value, (tuple, RegionOfInterest)):
                return value
            return _number(value, (section, key))

        return convert

    run_section = dict(merged["run"], seed=seed)
    run = _build(RunPlan, run_section, ("run",), numeric("run"))
    detector = _build(DetectorResponse, merged["detector"], ("detector",), numeric("detector"))
    veto = _build(VetoModel, merged["veto"], ("veto",), numeric("veto"))

    bg = dict(merged["background"])
    lines = []
    for i, line in enumerate(bg.pop("lines")):
        path = ("background", "lines", i)
        if not isinstance(line, dict):
            raise ConfigError("expected an object", path)
        lines.append(_build(Line, line, path, lambda k, v, p=path: _number(v, p + (k,))))
    bg["energy_range"] = tuple(_number(v, ("background", "energy_range")) for v in bg["energy_range"])
    background = _build(BackgroundModel, dict(bg, lines=tuple(lines)), ("background",), numeric("background"))

    an = dict(merged["analysis"])
    try:
        an["roi"] = RegionOfInterest(*(_number(v, ("analysis", "roi")) for v in an["roi"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), ("analysis", "roi")) from None
    if len(an["bins"]) != 3:
        raise ConfigError("bins must be [low, high, width]", ("analysis", "bins"))
    an["bins"] = tuple(_number(v, ("analysis", "bins")) for v in an["bins"])
    an["acceptance_samples"] = _number(an["acceptance_samples"], ("analysis", "acceptance_samples"), integer=True)
    analysis = _build(AnalysisSettings, an, ("analysis",), numeric("analysis"))

    config = ExperimentConfig(geo, run, detector, background, veto, analysis, seed, preset_name)
    try:
        config.layout()
    except ValueError as exc:
        raise ConfigError(str(exc), ("geometry",)) from None
    return config


def locate(text: str, path: tuple) -> int | None:
    """Best-effort line number of the innermost key of ``path`` in a JSON document."""
    pos = 0
    found = None
    for key in path:
        if isinstance(key, int):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(str(key))).search(text, pos)
        if m is None:
            break
        pos = m.end()
        found = text.count("\n", 0, m.start()) + 1
    return found


def loads(text: str) -> ExperimentConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, line=exc.lineno) from None
    try:
        return from_dict(doc)
    except ConfigError as exc:
        raise ConfigError(exc.message, exc.path, locate(text, exc.path)) from None


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def preset(name: str, **overrides) -> ExperimentConfig:
    """Compiled-in preset with optional section overrides, e.g. ``run={"duration_current": 0}``."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}", ("preset",))
    return from_dict(deep_merge({"preset": name}, overrides))
