"""Target/detector layout and Monte Carlo acceptance.

Lengths are in mm. Strips are axis-aligned boxes: thickness along x, width
along y, length along z (the current flows along z). Detector cells are
axis-aligned rectangles whose sensitive face looks along ``facing``.

Emission points are uniform over the strip volume and directions are
isotropic. A ray counts as detected when it reaches the front of a cell's
active face; for the attenuated acceptance it is weighted by the Beer-Lambert
transmission through all copper crossed on the way.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import physics
from .rng import block_generator, map_blocks

SCHEMA_VERSION = 1
BLOCK_SIZE = 1 << 16
STREAM_LABEL = "geometry/emission"

_AXES = {"x": 0, "y": 1, "z": 2}
_FACINGS = ("+x", "-x", "+y", "-y", "+z", "-z")

# VIP2 (2016) target: two strips with the SDD arrays 6 mm away.
STRIP_LENGTH = 91.0
STRIP_WIDTH = 20.0
DETECTOR_GAP = 6.0
# Spacing between the two strips (cooling line); not constrained by data.
STRIP_SEPARATION = 10.0
# 1x3 array of 10x10 mm cells on each side.
VIP2_CELL_SIZE = 10.0
VIP2_CELL_PITCH = 11.0
# Upgrade: per side two 3x3 units of 8x8 mm cells, 85 % active fill.
UPGRADE_CELL_SIZE = 8.0
UPGRADE_CELL_PITCH = 8.0 / math.sqrt(0.85)
UPGRADE_UNIT_SPACING = 28.0
SDD_DEPLETION_UM = 450.0

# Calibrated so that geometric_acceptance(vip2-2016, 7.7 keV) = 0.030;
# see calibrate_strip_thickness and the README.
DEFAULT_STRIP_THICKNESS = 0.019


@dataclass(frozen=True)
class TargetStrip:
    length: float
    width: float
    thickness: float
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if min(self.length, self.width, self.thickness) <= 0:
            raise ValueError(f"strip extents must be positive: {self}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def extents(self) -> np.ndarray:
        return np.array([self.thickness, self.width, self.length])

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - self.extents / 2

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + self.extents / 2

    @property
    def volume(self) -> float:
        return self.length * self.width * self.thickness


@dataclass(frozen=True)
class DetectorCell:
    """Rectangular active area.

    ``active_width`` and ``active_height`` run along the two axes orthogonal
    to the face normal, in x, y, z order (e.g. y then z for a cell facing x).
    """

    id: int
    active_width: float
    active_height: float
    center: tuple[float, float, float]
    facing: str
    depletion_depth: float = SDD_DEPLETION_UM

    def __post_init__(self):
        if min(self.active_width, self.active_height, self.depletion_depth) <= 0:
            raise ValueError(f"cell {self.id}: extents must be positive")
        if self.facing not in _FACINGS:
            raise ValueError(f"cell {self.id}: facing must be one of {_FACINGS}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def normal_axis(self) -> int:
        return _AXES[self.facing[1]]

    @property
    def normal_sign(self) -> float:
        return 1.0 if self.facing[0] == "+" else -1.0

    @property
    def in_plane_axes(self) -> tuple[int, int]:
        a, b = (i for i in range(3) if i != self.normal_axis)
        return a, b

    @property
    def area(self) -> float:
        """Active area in mm^2."""
        return self.active_width * self.active_height

    def bounds(self) -> tuple[tuple[float, float], tuple[float, float]]:
        a, b = self.in_plane_axes
        hw, hh = self.active_width / 2, self.active_height / 2
        return (
            (self.center[a] - hw, self.center[a] + hw),
            (self.center[b] - hh, self.center[b] + hh),
        )


@dataclass(frozen=True)
class GeometryLayout:
    strips: tuple[TargetStrip, ...]
    cells: tuple[DetectorCell, ...]
    preset_name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "strips", tuple(self.strips))
        object.__setattr__(self, "cells", tuple(self.cells))
        if not self.strips or not self.cells:
            raise ValueError("layout needs at least one strip and one cell")
        ids = [c.id for c in self.cells]
        if len(set(ids)) != len(ids):
            raise ValueError("cell ids must be unique")
        _check_no_overlap(self.cells)

    @property
    def detector_area_cm2(self) -> float:
        return sum(c.area for c in self.cells) / 100.0

    def gap_to_strip(self, cell: DetectorCell) -> float:
        """Normal distance from a cell's face to the nearest strip surface it faces."""
        ax, s = cell.normal_axis, cell.normal_sign
        gaps = []
        for strip in self.strips:
            surface = strip.hi[ax] if s < 0 else strip.lo[ax]
            gap = (cell.center[ax] - surface) * -s
            if gap >= 0:
                gaps.append(gap)
        return min(gaps) if gaps else math.inf

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "preset_name": self.preset_name,
            "strips": [asdict(s) | {"center": list(s.center)} for s in self.strips],
            "cells": [asdict(c) | {"center": list(c.center)} for c in self.cells],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GeometryLayout":
        if doc.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported geometry schema {doc.get('schema')!r}")
        strips = [TargetStrip(**{**s, "center": tuple(s["center"])}) for s in doc["strips"]]
        cells = [DetectorCell(**{**c, "center": tuple(c["center"])}) for c in doc["cells"]]
        return cls(tuple(strips), tuple(cells), doc.get("preset_name", "custom"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "GeometryLayout":
        return cls.from_dict(json.loads(text))


def _check_no_overlap(cells):
    for i, a in enumerate(cells):
        for b in cells[i + 1 :]:
            if a.normal_axis != b.normal_axis or a.center[a.normal_axis] != b.center[b.normal_axis]:
                continue
            (a0, a1), (a2, a3) = a.bounds()
            (b0, b1), (b2, b3) = b.bounds()
            if a0 < b1 and b0 < a1 and a2 < b3 and b2 < a3:
                raise ValueError(f"cells {a.id} and {b.id} overlap")


@dataclass(frozen=True)
class AcceptanceResult:
    """Outcome of an acceptance integration.

    ``mc_standard_error`` refers to ``acceptance_with_attenuation`` (which
    equals the solid-angle fraction when attenuation is ignored).
    ``cell_weights`` holds each cell's contribution; they sum to the detected fraction.
    """

    solid_angle_fraction: float
    acceptance_with_attenuation: float
    mc_standard_error: float
    n_samples: int
    seed: int
    energy: float | None = None
    cell_weights: tuple[float, ...] = field(default=(), compare=True)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cell_weights"] = list(self.cell_weights)
        return d


# ---------------------------------------------------------------- sampling


def _directions(u_cos, u_phi):
    cos_t = 2.0 * u_cos - 1.0
    sin_t = np.sqrt(np.clip(1.0 - cos_t * cos_t, 0.0, None))
    phi = 2.0 * np.pi * u_phi
    return np.column_stack((sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t))


def _emission_from_uniforms(layout: GeometryLayout, u: np.ndarray):
    volumes = np.array([s.volume for s in layout.strips])
    cum = np.cumsum(volumes) / volumes.sum()
    which = np.minimum(np.searchsorted(cum, u[:, 0], side="right"), len(volumes) - 1)
    lo = np.array([s.lo for s in layout.strips])[which]
    ext = np.array([s.extents for s in layout.strips])[which]
    points = lo + u[:, 1:4] * ext
    return points, _directions(u[:, 4], u[:, 5])


def sample_emission(layout: GeometryLayout, rng: np.random.Generator, n: int = 1):
    """Draw ``n`` emission points (uniform in strip volume) and unit directions."""
    return _emission_from_uniforms(layout, rng.random((n, 6)))


# ------------------------------------------------------------- ray tracing


def _first_cell_hit(layout: GeometryLayout, points, dirs):
    """Index of the first cell whose front face each ray reaches (-1 if none) and its distance."""
    n = len(points)
    t_best = np.full(n, np.inf)
    idx = np.full(n, -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k, cell in enumerate(layout.cells):
            ax = cell.normal_axis
            d = dirs[:, ax]
            t = (cell.center[ax] - points[:, ax]) / d
            ok = (d * cell.normal_sign < 0) & (t > 0) & (t < t_best)
            (a0, a1), (b0, b1) = cell.bounds()
            ia, ib = cell.in_plane_axes
            pa = points[:, ia] + t * dirs[:, ia]
            pb = points[:, ib] + t * dirs[:, ib]
            ok &= (pa >= a0) & (pa <= a1) & (pb >= b0) & (pb <= b1)
            t_best = np.where(ok, t, t_best)
            idx = np.where(ok, k, idx)
    return idx, t_best


def copper_path_length(layout: GeometryLayout, points, dirs, t_stop):
    """Length (mm) of each segment ``p + t d, 0 <= t <= t_stop`` inside any strip."""
    total = np.zeros(len(points))
    with np.errstate(divide="ignore", invalid="ignore"):
        for strip in layout.strips:
            t_in = np.zeros(len(points))
            t_out = np.asarray(t_stop, dtype=float).copy()
            for ax in range(3):
                d = dirs[:, ax]
                p = points[:, ax]
                lo, hi = strip.lo[ax], strip.hi[ax]
                t1 = (lo - p) / d
                t2 = (hi - p) / d
                parallel = d == 0
                inside = (p >= lo) & (p <= hi)
                near = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
                far = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
                t_in = np.maximum(t_in, near)
                t_out = np.minimum(t_out, far)
            total += np.clip(t_out - t_in, 0.0, None)
    return total


def _tally_block(layout, seed, block, m, mu_per_mm):
    u = block_generator(seed, STREAM_LABEL, block).random((m, 6))
    points, dirs = _emission_from_uniforms(layout, u)
    idx, t_hit = _first_cell_hit(layout, points, dirs)
    hit = idx >= 0
    n_cells = len(layout.cells)
    cell_hits = np.bincount(idx[hit], minlength=n_cells)
    if mu_per_mm is None:
        w = hit.astype(float)
    else:
        w = np.zeros(m)
        path = copper_path_length(layout, points[hit], dirs[hit], t_hit[hit])
        w[hit] = np.exp(-mu_per_mm * path)
    cell_w = np.bincount(idx[hit], weights=w[hit], minlength=n_cells)
    return int(hit.sum()), math.fsum(w), math.fsum(w * w), cell_hits, cell_w


def _integrate(layout, n_samples, seed, energy, workers):
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    mu_per_mm = None
    if energy is not None:
        mu_per_mm = physics.copper().linear_attenuation(energy) / 10.0
    n_blocks = -(-n_samples // BLOCK_SIZE)

    def run(block):
        m = min(BLOCK_SIZE, n_samples - block * BLOCK_SIZE)
        return _tally_block(layout, seed, block, m, mu_per_mm)

    tallies = map_blocks(run, range(n_blocks), workers)
    hits = sum(t[0] for t in tallies)
    w_sum = math.fsum(t[1] for t in tallies)
    w_sq = math.fsum(t[2] for t in tallies)
    cell_hits = np.sum([t[3] for t in tallies], axis=0)
    cell_w = [math.fsum(t[4][k] for t in tallies) for k in range(len(layout.cells))]

    n = n_samples
    solid = hits / n
    if energy is None:
        err = math.sqrt(solid * (1 - solid) / n)
        return AcceptanceResult(solid, solid, err, n, seed, None, tuple(float(c) / n for c in cell_hits))
    acc = w_sum / n
    var = max(w_sq / n - acc * acc, 0.0)
    err = math.sqrt(var / n)
    return AcceptanceResult(solid, acc, err, n, seed, float(energy), tuple(c / n for c in cell_w))


def solid_angle_fraction(layout: GeometryLayout, n_samples: int, seed: int, workers: int | None = None) -> AcceptanceResult:
    """Fraction of isotropically emitted photons whose line of flight meets a cell."""
    return _integrate(layout, n_samples, seed, None, workers)


def geometric_acceptance(
    layout: GeometryLayout, energy: float, n_samples: int, seed: int, workers: int | None = None
) -> AcceptanceResult:
    """Solid-angle fraction with each detected ray weighted by its copper transmission."""
    return _integrate(layout, n_samples, seed, energy, workers)


@lru_cache(maxsize=64)
def cached_acceptance(layout: GeometryLayout, energy: float, n_samples: int, seed: int) -> AcceptanceResult:
    return geometric_acceptance(layout, energy, n_samples, seed)


# ---------------------------------------------------------------- presets


def _two_strips(thickness):
    x = STRIP_SEPARATION / 2 + thickness / 2
    return (
        TargetStrip(STRIP_LENGTH, STRIP_WIDTH, thickness, (x, 0.0, 0.0)),
        TargetStrip(STRIP_LENGTH, STRIP_WIDTH, thickness, (-x, 0.0, 0.0)),
    )


def vip2_2016(strip_thickness: float = DEFAULT_STRIP_THICKNESS) -> GeometryLayout:
    """Two strips, each faced by a 1x3 array of 1 cm^2 cells at 6 mm."""
    x_face = STRIP_SEPARATION / 2 + strip_thickness + DETECTOR_GAP
    cells = []
    for side, facing in ((1.0, "-x"), (-1.0, "+x")):
        for k in (-1, 0, 1):
            cells.append(
                DetectorCell(len(cells), VIP2_CELL_SIZE, VIP2_CELL_SIZE, (side * x_face, 0.0, k * VIP2_CELL_PITCH), facing)
            )
    return GeometryLayout(_two_strips(strip_thickness), tuple(cells), "vip2-2016")


def vip2_upgrade(strip_thickness: float = DEFAULT_STRIP_THICKNESS) -> GeometryLayout:
    """Four 3x3 units of 8x8 mm cells, two units on each side of the target."""
    x_face = STRIP_SEPARATION / 2 + strip_thickness + DETECTOR_GAP
    cells = []
    for side, facing in ((1.0, "-x"), (-1.0, "+x")):
        for unit_z in (-UPGRADE_UNIT_SPACING / 2, UPGRADE_UNIT_SPACING / 2):
            for iy in (-1, 0, 1):
                for iz in (-1, 0, 1):
                    center = (side * x_face, iy * UPGRADE_CELL_PITCH, unit_z + iz * UPGRADE_CELL_PITCH)
                    cells.append(DetectorCell(len(cells), UPGRADE_CELL_SIZE, UPGRADE_CELL_SIZE, center, facing))
    return GeometryLayout(_two_strips(strip_thickness), tuple(cells), "vip2-upgrade")


PRESETS = {"vip2-2016": vip2_2016, "vip2-upgrade": vip2_upgrade}


def preset(name: str, **kwargs) -> GeometryLayout:
    try:
        return PRESETS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown geometry preset {name!r}; choose from {sorted(PRESETS)}") from None


def calibrate_strip_thickness(
    target: float = 0.03,
    energy: float = 7.70,
    n_samples: int = 2_000_000,
    seed: int = 2016,
    bounds: tuple[float, float] = (0.001, 1.0),
    tol: float = 1e-4,
) -> float:
    """Strip thickness (mm) at which the vip2-2016 acceptance at ``energy`` equals ``target``.

    Bisection on a fixed random stream, so the acceptance is a deterministic,
    monotonically decreasing function of thickness up to MC noise.
    """
    lo, hi = bounds

    def f(t):
        return geometric_acceptance(vip2_2016(t), energy, n_samples, seed).acceptance_with_attenuation - target

    if f(lo) < 0 or f(hi) > 0:
        raise ValueError("target acceptance not bracketed by thickness bounds")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
