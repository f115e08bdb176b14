"""Event generation for a configured run.

Signal photons come from Pauli-forbidden transitions of the injected
electrons; background is a flat continuum plus fluorescence lines. Events
carry a detector cell, a timestamp, an origin tag and a veto decision made by
the scintillator coincidence model.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple

import numpy as np
from scipy.special import ndtr, ndtri

from . import physics
from .geometry import AcceptanceResult, cached_acceptance
from .physics import SECONDS_PER_DAY, ElectronBudget, fwhm_to_sigma
from .rng import block_generator, map_blocks

SIGNAL, BACKGROUND = 0, 1
ORIGIN_NAMES = {SIGNAL: "signal", BACKGROUND: "background"}
CSV_HEADER = ("time_s", "energy_keV", "cell_id", "origin", "vetoed")

# Run periods are cut into fixed one-day slices, each with its own stream.
SLICE_DAYS = 1.0

DEFAULT_P_CAPTURE = 0.1


@dataclass(frozen=True)
class RunPlan:
    current: float = 100.0
    duration_current: float = 40.0
    duration_nocurrent: float = 70.0
    injected_beta2_over_2: float = 0.0
    seed: int = 1

    def __post_init__(self):
        if self.current < 0:
            raise ValueError("current must be non-negative")
        if self.duration_current < 0 or self.duration_nocurrent < 0:
            raise ValueError("durations must be non-negative")
        if self.injected_beta2_over_2 < 0:
            raise ValueError("injected beta^2/2 must be non-negative")

    @property
    def budget(self) -> ElectronBudget:
        return ElectronBudget.from_days(self.current, self.duration_current)


@dataclass(frozen=True)
class DetectorResponse:
    energy_fwhm: float = 150.0  # eV
    time_fwhm: float = 400.0  # ns
    depletion_depth: float = 450.0  # um
    threshold: float = 1.0  # keV

    def __post_init__(self):
        if min(self.energy_fwhm, self.time_fwhm, self.depletion_depth, self.threshold) < 0:
            raise ValueError("detector response parameters must be non-negative")

    @property
    def energy_sigma_kev(self) -> float:
        return fwhm_to_sigma(self.energy_fwhm) / 1000.0

    @property
    def time_sigma_ns(self) -> float:
        return fwhm_to_sigma(self.time_fwhm)


@dataclass(frozen=True)
class Line:
    energy: float  # keV
    rate: float  # counts / (day cm^2)
    natural_width: float = 0.0  # eV, Lorentzian FWHM

    def __post_init__(self):
        if self.energy <= 0 or self.rate < 0 or self.natural_width < 0:
            raise ValueError(f"invalid background line {self}")


@dataclass(frozen=True)
class BackgroundModel:
    continuum_rate: float = 0.0  # counts / (keV day cm^2)
    lines: tuple[Line, ...] = ()
    veto_correlated_fraction: float = 1.0
    shielding_suppression: float = 1.0
    rrs_suppression: float = 1.0
    energy_range: tuple[float, float] = (1.0, 20.0)

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "energy_range", tuple(self.energy_range))
        if self.continuum_rate < 0:
            raise ValueError("continuum_rate must be non-negative")
        if not 0.0 <= self.veto_correlated_fraction <= 1.0:
            raise ValueError("veto_correlated_fraction must lie in [0, 1]")
        if self.shielding_suppression < 1 or self.rrs_suppression < 1:
            raise ValueError("suppression factors must be >= 1")
        lo, hi = self.energy_range
        if not 0 < lo < hi:
            raise ValueError("energy_range must satisfy 0 < low < high")

    @property
    def suppression(self) -> float:
        return self.shielding_suppression * self.rrs_suppression

    def expected_counts(self, exposure_days: float, area_cm2: float) -> float:
        """Mean number of generated background events over the full energy range."""
        lo, hi = self.energy_range
        per_day_cm2 = self.continuum_rate * (hi - lo) + sum(l.rate for l in self.lines)
        return per_day_cm2 * exposure_days * area_cm2 / self.suppression

    def expected_roi_counts(self, low: float, high: float, exposure_days: float, area_cm2: float, sigma_kev: float) -> float:
        """Mean counts in [low, high), lines treated as Gaussian peaks of width ``sigma_kev``."""
        lo, hi = self.energy_range
        n = self.continuum_rate * max(0.0, min(high, hi) - max(low, lo))
        for line in self.lines:
            s = max(sigma_kev, 1e-12)
            n += line.rate * (ndtr((high - line.energy) / s) - ndtr((low - line.energy) / s))
        return float(n) * exposure_days * area_cm2 / self.suppression


@dataclass(frozen=True)
class VetoModel:
    window_halfwidth: float = 600.0  # ns
    efficiency_photon: float = 0.05
    efficiency_cosmic: float = 0.95
    accidental_rate: float = 0.0  # Hz
    environment: str = "underground"
    enabled: bool = True

    def __post_init__(self):
        for name in ("efficiency_photon", "efficiency_cosmic"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.window_halfwidth < 0 or self.accidental_rate < 0:
            raise ValueError("window_halfwidth and accidental_rate must be non-negative")
        if self.environment not in ("underground", "surface"):
            raise ValueError("environment must be 'underground' or 'surface'")

    @property
    def efficiency(self) -> float:
        """Coincidence efficiency for veto-correlated background in this environment."""
        return self.efficiency_photon if self.environment == "underground" else self.efficiency_cosmic

    @property
    def accidental_probability(self) -> float:
        return -math.expm1(-self.accidental_rate * 2.0 * self.window_halfwidth * 1e-9)


class EventRecord(NamedTuple):
    energy: float
    time: float
    cell_id: int
    origin: str
    vetoed: bool


@dataclass
class EventTable:
    """Column store of detected events.

    ``correlated`` marks background with a physical scintillator partner;
    ``hit_dt`` is the offset (ns) of the coincident scintillator hit that was
    found, NaN if none.
    """

    time: np.ndarray = field(default_factory=lambda: np.zeros(0))
    energy: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cell_id: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    vetoed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    correlated: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    hit_dt: np.ndarray = field(default_factory=lambda: np.zeros(0))

    _COLUMNS = ("time", "energy", "cell_id", "origin", "vetoed", "correlated", "hit_dt")

    def __len__(self) -> int:
        return len(self.time)

    def __iter__(self) -> Iterator[EventRecord]:
        for i in range(len(self)):
            yield EventRecord(
                float(self.energy[i]),
                float(self.time[i]),
                int(self.cell_id[i]),
                ORIGIN_NAMES[int(self.origin[i])],
                bool(self.vetoed[i]),
            )

    def take(self, index) -> "EventTable":
        return EventTable(*(getattr(self, c)[index] for c in self._COLUMNS))

    @classmethod
    def concat(cls, tables) -> "EventTable":
        tables = list(tables)
        if not tables:
            return cls()
        return cls(*(np.concatenate([getattr(t, c) for t in tables]) for c in cls._COLUMNS))

    def sorted(self) -> "EventTable":
        """Time-ordered copy; ties broken by energy then cell."""
        return self.take(np.lexsort((self.cell_id, self.energy, self.time)))

    def mask(self, origin: int | None = None, include_vetoed: bool = True) -> np.ndarray:
        m = np.ones(len(self), dtype=bool)
        if origin is not None:
            m &= self.origin == origin
        if not include_vetoed:
            m &= ~self.vetoed
        return m

    def to_csv(self) -> str:
        lines = [",".join(CSV_HEADER)]
        names = [ORIGIN_NAMES[SIGNAL], ORIGIN_NAMES[BACKGROUND]]
        for t, e, c, o, v in zip(
            self.time.tolist(), self.energy.tolist(), self.cell_id.tolist(), self.origin.tolist(), self.vetoed.tolist()
        ):
            lines.append(f"{t!r},{e!r},{c},{names[o]},{int(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "EventTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ValueError(f"event CSV must start with header {','.join(CSV_HEADER)}")
        codes = {v: k for k, v in ORIGIN_NAMES.items()}
        cols = ([], [], [], [], [])
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ValueError(f"line {lineno}: expected 5 fields, got {len(row)}")
            try:
                cols[0].append(float(row[0]))
                cols[1].append(float(row[1]))
                cols[2].append(int(row[2]))
                cols[3].append(codes[row[3].strip()])
                cols[4].append(bool(int(row[4])))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
        n = len(cols[0])
        return cls(
            np.array(cols[0], dtype=float),
            np.array(cols[1], dtype=float),
            np.array(cols[2], dtype=np.int64),
            np.array(cols[3], dtype=np.int8),
            np.array(cols[4], dtype=bool),
            np.zeros(n, dtype=bool),
            np.full(n, np.nan),
        )


# ---------------------------------------------------------------- physics


def detection_efficiency(energy: float, depth: float) -> float:
    """Photoabsorption probability in ``depth`` um of silicon at ``energy`` keV."""
    if depth < 0:
        raise ValueError("depth must be non-negative")
    mu = physics.silicon().linear_attenuation(energy)
    return -math.expm1(-mu * depth * 1e-4)


def expected_signal_count(beta2_over_2, budget: ElectronBudget, capture_factor, acceptance, det_eff) -> float:
    """Mean number of detected forbidden-transition X-rays.

    ``acceptance`` may be an :class:`AcceptanceResult` or a plain fraction.
    """
    if isinstance(acceptance, AcceptanceResult):
        acceptance = acceptance.acceptance_with_attenuation
    if beta2_over_2 < 0 or capture_factor < 0 or not 0 <= acceptance <= 1 or not 0 <= det_eff <= 1:
        raise ValueError("signal factors out of range")
    return beta2_over_2 * budget.n_new * capture_factor * acceptance * det_eff


# ------------------------------------------------------------- generation


def _empty(n=0) -> EventTable:
    return EventTable(
        np.zeros(n), np.zeros(n), np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int8),
        np.zeros(n, dtype=bool), np.zeros(n, dtype=bool), np.full(n, np.nan),
    )


def _pick_cells(rng, n, cell_ids, weights):
    if not len(cell_ids):
        return np.zeros(n, dtype=np.int64)
    cum = np.cumsum(weights, dtype=float)
    cum /= cum[-1]
    k = np.minimum(np.searchsorted(cum, rng.random(n), side="right"), len(cell_ids) - 1)
    return np.asarray(cell_ids, dtype=np.int64)[k]


def generate_signal_events(
    plan: RunPlan,
    response: DetectorResponse,
    acceptance: AcceptanceResult,
    rng: np.random.Generator,
    *,
    capture_factor: float = DEFAULT_P_CAPTURE,
    det_eff: float | None = None,
    energy: float | None = None,
    window: tuple[float, float] | None = None,
    cell_ids=None,
) -> EventTable:
    """Poisson realisation of forbidden-transition X-rays during the current-on period.

    ``window`` restricts generation to a sub-interval (seconds) of the period;
    the expected count is scaled by its share of the period.
    """
    if energy is None:
        energy = physics.transition_energy(physics.TransitionKind.NON_PAULIAN)
    if det_eff is None:
        det_eff = detection_efficiency(energy, response.depletion_depth)
    period = plan.duration_current * SECONDS_PER_DAY
    t0, t1 = window if window is not None else (0.0, period)
    if period <= 0 or t1 <= t0 or plan.injected_beta2_over_2 == 0:
        return _empty()
    mean = expected_signal_count(plan.injected_beta2_over_2, plan.budget, capture_factor, acceptance, det_eff)
    n = int(rng.poisson(mean * (t1 - t0) / period))
    out = _empty(n)
    out.time = t0 + (t1 - t0) * rng.random(n)
    out.energy = rng.normal(energy, response.energy_sigma_kev, n)
    weights = acceptance.cell_weights or (1.0,)
    ids = cell_ids if cell_ids is not None else range(len(weights))
    out.cell_id = _pick_cells(rng, n, list(ids), weights)
    out.origin[:] = SIGNAL
    keep = out.energy >= max(response.threshold, np.finfo(float).tiny)
    return out.take(keep)


def generate_background_events(
    model: BackgroundModel,
    exposure: float,
    area: float,
    rng: np.random.Generator,
    *,
    response: DetectorResponse | None = None,
    t_start: float = 0.0,
    cells: tuple[tuple[int, float], ...] | None = None,
) -> EventTable:
    """Poisson realisation of the background model.

    ``exposure`` in days, ``area`` in cm^2. Events are placed uniformly in
    ``[t_start, t_start + exposure)`` seconds. ``cells`` gives ``(id, area)``
    pairs used to distribute events over detector cells.
    """
    response = response or DetectorResponse()
    lo, hi = model.energy_range
    scale = exposure * area / model.suppression
    parts = []

    n = int(rng.poisson(model.continuum_rate * (hi - lo) * scale))
    part = _empty(n)
    part.energy = lo + (hi - lo) * rng.random(n)
    parts.append(part)

    sigma = response.energy_sigma_kev
    for line in model.lines:
        n = int(rng.poisson(line.rate * scale))
        part = _empty(n)
        gamma = line.natural_width / 2000.0
        part.energy = line.energy + gamma * rng.standard_cauchy(n) + sigma * rng.standard_normal(n)
        parts.append(part)

    out = EventTable.concat(parts)
    n = len(out)
    out.time = t_start + exposure * SECONDS_PER_DAY * rng.random(n)
    ids, areas = zip(*cells) if cells else ((0,), (1.0,))
    out.cell_id = _pick_cells(rng, n, ids, areas)
    out.origin[:] = BACKGROUND
    out.correlated = rng.random(n) < model.veto_correlated_fraction
    keep = (out.energy >= max(lo, response.threshold)) & (out.energy < hi)
    return out.take(keep)


def apply_veto(events: EventTable, veto: VetoModel, rng: np.random.Generator, *, time_fwhm: float = 400.0) -> EventTable:
    """Set ``vetoed`` from scintillator coincidences.

    Correlated background has a partner hit with probability equal to the
    environment's veto efficiency, offset by the SDD time resolution (kept
    inside the window). Any event can also pick up an accidental hit, uniform
    in the window.
    """
    n = len(events)
    out = events.take(slice(None))
    u = rng.random((n, 4))
    w = veto.window_halfwidth
    sigma = fwhm_to_sigma(time_fwhm)

    partner = events.correlated & (u[:, 0] < veto.efficiency)
    if sigma > 0 and w > 0:
        edge = ndtr(-w / sigma)
        dt_partner = sigma * ndtri(edge + u[:, 1] * (1.0 - 2.0 * edge))
    else:
        dt_partner = np.zeros(n)
    accidental = ~partner & (u[:, 2] < veto.accidental_probability)
    dt_accidental = w * (2.0 * u[:, 3] - 1.0)

    out.hit_dt = np.where(partner, dt_partner, np.where(accidental, dt_accidental, np.nan))
    out.vetoed = (partner | accidental) if veto.enabled else np.zeros(n, dtype=bool)
    return out


# ------------------------------------------------------------------- runs


def _slices(days: float):
    n = math.ceil(days / SLICE_DAYS) if days > 0 else 0
    return [(k * SLICE_DAYS, min(SLICE_DAYS, days - k * SLICE_DAYS)) for k in range(n)]


def run_factors(config) -> tuple[AcceptanceResult, float, float, float]:
    """Acceptance, detection efficiency, capture factor and signal energy for a config."""
    a = config.analysis
    layout = config.layout()
    acceptance = cached_acceptance(layout, a.signal_energy, a.acceptance_samples, config.derived_seed("acceptance"))
    det_eff = detection_efficiency(a.signal_energy, config.detector.depletion_depth)
    return acceptance, det_eff, a.capture_factor, a.signal_energy


def simulate_period(config, period: str, workers: int | None = None) -> EventTable:
    """Events for one period (``"current"`` or ``"nocurrent"``), time-ordered."""
    plan = config.run
    days = plan.duration_current if period == "current" else plan.duration_nocurrent
    layout = config.layout()
    cells = tuple((c.id, c.area) for c in layout.cells)
    area = layout.detector_area_cm2
    with_signal = period == "current" and plan.injected_beta2_over_2 > 0
    if with_signal:
        acceptance, det_eff, capture, energy = run_factors(config)
    seed = config.seed

    def one_slice(k):
        start, length = _slices(days)[k]
        t0 = start * SECONDS_PER_DAY
        parts = [
            generate_background_events(
                config.background, length, area, block_generator(seed, f"background/{period}", k),
                response=config.detector, t_start=t0, cells=cells,
            )
        ]
        if with_signal:
            parts.append(
                generate_signal_events(
                    plan, config.detector, acceptance, block_generator(seed, "signal", k),
                    capture_factor=capture, det_eff=det_eff, energy=energy,
                    window=(t0, t0 + length * SECONDS_PER_DAY), cell_ids=[c.id for c in layout.cells],
                )
            )
        events = EventTable.concat(parts)
        return apply_veto(events, config.veto, block_generator(seed, f"veto/{period}", k), time_fwhm=config.detector.time_fwhm)

    tables = map_blocks(one_slice, range(len(_slices(days))), workers)
    return EventTable.concat(tables).sorted()


def simulate_run(config, workers: int | None = None) -> tuple[EventTable, EventTable]:
    """Event streams for the current-on and current-off periods."""
    return simulate_period(config, "current", workers), simulate_period(config, "nocurrent", workers)


def calibrate_continuum_rate(config, target_limit: float, confidence_sigma: float | None = None) -> float:
    """Continuum rate that puts the median zero-signal upper limit at ``target_limit``.

    The median of ``max(0, excess) + k*sigma`` over background-only runs sits at
    ``k*sigma``, so the rate solves ``k * sigma(rate) = target * denominator``
    where ``sigma^2 = B_on + r^2 B_off`` uses the expected non-vetoed ROI counts.
    """
    acceptance, det_eff, capture, _ = run_factors(config)
    k = confidence_sigma if confidence_sigma is not None else config.analysis.confidence_sigma
    plan = config.run
    denom = plan.budget.n_new * capture * acceptance.acceptance_with_attenuation * det_eff
    sigma_target = target_limit * denom / k
    r = plan.duration_current / plan.duration_nocurrent
    low, high = config.analysis.roi
    area = config.layout().detector_area_cm2
    survive = 1.0 - config.veto.efficiency * config.background.veto_correlated_fraction if config.veto.enabled else 1.0
    sig_e = config.detector.energy_sigma_kev

    def variance(model):
        b_on = model.expected_roi_counts(low, high, plan.duration_current, area, sig_e) * survive
        b_off = model.expected_roi_counts(low, high, plan.duration_nocurrent, area, sig_e) * survive
        return b_on + r * r * b_off

    lines_only = variance(replace(config.background, continuum_rate=0.0))
    per_unit = variance(replace(config.background, continuum_rate=1.0)) - lines_only
    rate = (sigma_target**2 - lines_only) / per_unit
    if rate < 0:
        raise ValueError("line background alone exceeds the target fluctuation")
    return rate
