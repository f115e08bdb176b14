"""Spectra, on/off subtraction, upper limits and sensitivity arithmetic."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .physics import ElectronBudget

SPECTRUM_HEADER = ("bin_low_keV", "bin_high_keV", "counts")
DEFAULT_ROI = (7.4, 7.9)
_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class RegionOfInterest:
    low: float = DEFAULT_ROI[0]
    high: float = DEFAULT_ROI[1]

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"ROI needs low < high, got [{self.low}, {self.high}]")

    def __iter__(self):
        return iter((self.low, self.high))


@dataclass
class Spectrum:
    bin_edges: np.ndarray
    counts: np.ndarray
    exposure: float = 0.0  # days
    detector_area: float = 0.0  # cm^2
    overflow: int = 0

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.bin_edges.ndim != 1 or len(self.bin_edges) < 2 or np.any(np.diff(self.bin_edges) <= 0):
            raise ValueError("bin edges must be strictly increasing with at least two entries")
        if len(self.counts) != len(self.bin_edges) - 1:
            raise ValueError("need exactly one count per bin")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def roi_counts(self, roi) -> int:
        """Counts in the bins that make up ``roi``; its edges must coincide with bin edges."""
        low, high = roi
        i = _edge_index(self.bin_edges, low)
        j = _edge_index(self.bin_edges, high)
        return int(self.counts[i:j].sum())

    def rebin(self, factor: int) -> "Spectrum":
        """Merge every ``factor`` adjacent bins; a trailing remainder is merged into one bin."""
        if factor < 1:
            raise ValueError("factor must be >= 1")
        starts = np.arange(0, len(self.counts), factor)
        counts = np.add.reduceat(self.counts, starts)
        edges = np.append(self.bin_edges[starts], self.bin_edges[-1])
        return Spectrum(edges, counts, self.exposure, self.detector_area, self.overflow)

    def __add__(self, other: "Spectrum") -> "Spectrum":
        _check_compatible(self, other)
        return Spectrum(
            self.bin_edges, self.counts + other.counts, self.exposure, self.detector_area, self.overflow + other.overflow
        )

    def to_csv(self) -> str:
        rows = [",".join(SPECTRUM_HEADER)]
        for lo, hi, c in zip(self.bin_edges[:-1].tolist(), self.bin_edges[1:].tolist(), self.counts.tolist()):
            rows.append(f"{lo!r},{hi!r},{c}")
        return "\n".join(rows) + "\n"

    @classmethod
    def from_csv(cls, text: str, exposure: float = 0.0, detector_area: float = 0.0) -> "Spectrum":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != SPECTRUM_HEADER:
            raise ValueError(f"spectrum CSV must start with header {','.join(SPECTRUM_HEADER)}")
        lows, highs, counts = [], [], []
        for row in reader:
            if not row:
                continue
            lows.append(float(row[0]))
            highs.append(float(row[1]))
            counts.append(int(row[2]))
        if not lows:
            raise ValueError("spectrum CSV has no bins")
        if not np.array_equal(lows[1:], highs[:-1]):
            raise ValueError("spectrum bins are not contiguous")
        return cls(np.array(lows + highs[-1:]), np.array(counts), exposure, detector_area)


def _edge_index(edges: np.ndarray, value: float) -> int:
    i = int(np.argmin(np.abs(edges - value)))
    if abs(edges[i] - value) > _EDGE_TOL * max(1.0, abs(value)):
        raise ValueError(f"ROI edge {value} keV does not coincide with a bin edge")
    return i


def _check_compatible(a: Spectrum, b: Spectrum):
    if a.bin_edges.shape != b.bin_edges.shape or not np.allclose(a.bin_edges, b.bin_edges, rtol=0, atol=_EDGE_TOL):
        raise ValueError("spectra have different binning")


def make_bin_edges(low: float, high: float, width: float) -> np.ndarray:
    n = round((high - low) / width)
    if n < 1 or abs(n * width - (high - low)) > 1e-9:
        raise ValueError(f"bin width {width} does not divide [{low}, {high}]")
    return np.round(low + width * np.arange(n + 1), 9)


def histogram(events, bin_edges, include_vetoed: bool = False, exposure: float = 0.0, detector_area: float = 0.0, shards: int = 1) -> Spectrum:
    """Bin event energies into right-open bins ``[low, high)``.

    Vetoed events are skipped unless ``include_vetoed``. Events outside the
    binning go to the ``overflow`` tally. ``shards`` splits the work into
    independent partial histograms that are summed.
    """
    edges = np.asarray(bin_edges, dtype=float)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    energy = np.asarray(events.energy, dtype=float)
    if not include_vetoed:
        energy = energy[~np.asarray(events.vetoed, dtype=bool)]
    nbins = len(edges) - 1
    counts = np.zeros(nbins, dtype=np.int64)
    overflow = 0
    for part in np.array_split(energy, max(1, shards)):
        idx = np.searchsorted(edges, part, side="right") - 1
        inside = (idx >= 0) & (idx < nbins)
        counts += np.bincount(idx[inside], minlength=nbins)
        overflow += int((~inside).sum())
    return Spectrum(edges, counts, exposure, detector_area, overflow)


def subtract(spec_on: Spectrum, spec_off: Spectrum, roi) -> tuple[float, float]:
    """Exposure-scaled ROI excess of ``spec_on`` over ``spec_off`` and its Poisson error."""
    _check_compatible(spec_on, spec_off)
    if spec_off.exposure <= 0 or spec_on.exposure <= 0:
        raise ValueError("both spectra need a positive exposure")
    r = spec_on.exposure / spec_off.exposure
    n_on = spec_on.roi_counts(roi)
    n_off = spec_off.roi_counts(roi)
    return n_on - r * n_off, math.sqrt(n_on + r * r * n_off)


def upper_limit_counts(excess: float, sigma: float, confidence_sigma: float = 3.0) -> float:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return max(0.0, excess) + confidence_sigma * sigma


@dataclass(frozen=True)
class LimitResult:
    beta2_over_2_upper: float
    n_x_upper: float
    excess: float
    sigma_excess: float
    n_new: float
    capture_factor: float
    acceptance: float
    det_eff: float
    confidence_sigma: float = 3.0

    @property
    def factors(self) -> tuple[float, float, float]:
        return self.capture_factor, self.acceptance, self.det_eff

    def recompute(self) -> float:
        return self.n_x_upper / (self.n_new * self.capture_factor * self.acceptance * self.det_eff)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "LimitResult":
        return cls(**doc)


def beta_limit(
    n_x_upper: float,
    budget: ElectronBudget,
    capture_factor: float,
    acceptance: float,
    det_eff: float,
    *,
    excess: float = float("nan"),
    sigma: float = float("nan"),
    confidence_sigma: float = 3.0,
) -> LimitResult:
    """Upper bound on beta^2/2 from an upper bound on anomalous X-ray counts."""
    if n_x_upper < 0:
        raise ValueError("n_x_upper must be non-negative")
    denom = budget.n_new * capture_factor * acceptance * det_eff
    if not denom > 0 or min(capture_factor, acceptance, det_eff) <= 0:
        raise ValueError("electron count and all efficiency factors must be positive")
    return LimitResult(
        n_x_upper / denom, n_x_upper, excess, sigma, budget.n_new, capture_factor, acceptance, det_eff, confidence_sigma
    )


# ------------------------------------------------------------- sensitivity


@dataclass(frozen=True)
class GainRow:
    name: str
    signal_factor: float
    background_factor: float
    sensitivity_gain: float


@dataclass(frozen=True)
class GainReport:
    rows: tuple[GainRow, ...]
    total_signal: float
    total_sensitivity: float
    total_background: float = 1.0

    @classmethod
    def from_rows(cls, rows) -> "GainReport":
        rows = tuple(rows)
        return cls(
            rows,
            math.prod(r.signal_factor for r in rows),
            math.prod(r.sensitivity_gain for r in rows),
            math.prod(r.background_factor for r in rows),
        )

    def row(self, name: str) -> GainRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) | {"background_reduction": 1.0 / math.sqrt(r.background_factor)} for r in self.rows],
            "total_signal": self.total_signal,
            "total_background": self.total_background,
            "total_sensitivity": self.total_sensitivity,
        }


VIP_FACTORS = {"geometry": 0.021, "detector efficiency": 0.48, "current": 40.0}
VIP2_FACTORS = {"geometry": 0.03, "detector efficiency": 0.99, "current": 100.0}

UPGRADE_ROWS = (
    # Larger SDD area (23 vs 6 cm^2) and coarser resolution (x4/3 ROI background).
    ("new SDDs", 3.0, (23.0 / 6.0) * (4.0 / 3.0)),
    ("passive shielding", 1.0, 1.0 / 20.0),
    ("RRS", 1.0, 1.0 / 3.0),
)


def gain_table_vip(old: dict = VIP_FACTORS, new: dict = VIP2_FACTORS) -> GainReport:
    """Signal gain of each factor in ``new`` relative to ``old`` (background unchanged)."""
    if set(old) != set(new):
        raise ValueError("old and new must list the same factors")
    rows = []
    for name in old:
        if old[name] <= 0 or new[name] <= 0:
            raise ValueError(f"factor {name!r} must be positive")
        s = new[name] / old[name]
        rows.append(GainRow(name, s, 1.0, s))
    return GainReport.from_rows(rows)


def gain_table_upgrade(rows=UPGRADE_ROWS) -> GainReport:
    """Sensitivity gain ``s / sqrt(b)`` per upgrade for signal factor s and background factor b."""
    out = []
    for name, s, b in rows:
        if b <= 0 or s <= 0:
            raise ValueError(f"{name}: factors must be positive")
        out.append(GainRow(name, s, b, s / math.sqrt(b)))
    return GainReport.from_rows(out)


def project_limit(current_limit: float, sensitivity_gain: float, time_ratio: float) -> float:
    """Background-dominated scaling of a limit: improves as gain * sqrt(exposure ratio)."""
    if current_limit <= 0 or sensitivity_gain <= 0 or time_ratio <= 0:
        raise ValueError("all inputs must be positive")
    return current_limit / (sensitivity_gain * math.sqrt(time_ratio))
