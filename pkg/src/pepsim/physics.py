"""Constants, transition energies, photon attenuation and unit helpers."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

ELEMENTARY_CHARGE = 1.602176634e-19  # C, exact SI
SECONDS_PER_DAY = 86400.0
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

# Conduction-electron mean free path in copper at room temperature.
ELECTRON_MFP_CU_CM = 3.9e-6

COPPER_DENSITY = 8.96
SILICON_DENSITY = 2.33


class TransitionKind(enum.Enum):
    NORMAL_K_ALPHA = "normal_k_alpha"
    NON_PAULIAN = "non_paulian"


DEFAULT_TRANSITION_ENERGIES = {
    TransitionKind.NORMAL_K_ALPHA: 8.05,
    TransitionKind.NON_PAULIAN: 7.70,
}


def transition_energy(kind: TransitionKind, overrides: dict | None = None) -> float:
    """Photon energy in keV of a 2p->1s transition in copper.

    ``overrides`` maps a :class:`TransitionKind` to a replacement energy.
    """
    if overrides and kind in overrides:
        return float(overrides[kind])
    return DEFAULT_TRANSITION_ENERGIES[kind]


def electron_count(current: float, duration: float) -> float:
    """Number of electrons delivered by ``current`` amperes over ``duration`` seconds."""
    if current < 0 or duration < 0:
        raise ValueError(f"current and duration must be non-negative, got {current}, {duration}")
    return current * duration / ELEMENTARY_CHARGE


@dataclass(frozen=True)
class ElectronBudget:
    current: float
    duration: float
    n_new: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "n_new", electron_count(self.current, self.duration))

    @classmethod
    def from_days(cls, current: float, days: float) -> "ElectronBudget":
        return cls(current, days * SECONDS_PER_DAY)


def fwhm_to_sigma(fwhm: float) -> float:
    if fwhm < 0:
        raise ValueError(f"fwhm must be non-negative, got {fwhm}")
    return fwhm / FWHM_PER_SIGMA


@dataclass(frozen=True)
class Material:
    """A homogeneous absorber with a tabulated mass attenuation coefficient.

    ``energies`` in keV, ``mu_over_rho`` in cm^2/g. Lookups between table
    points use log-log linear interpolation.
    """

    name: str
    density: float
    energies: tuple[float, ...]
    mu_over_rho: tuple[float, ...]

    def __post_init__(self):
        if self.density <= 0:
            raise ValueError(f"{self.name}: density must be positive")
        if len(self.energies) != len(self.mu_over_rho) or len(self.energies) < 2:
            raise ValueError(f"{self.name}: malformed attenuation table")
        e = np.asarray(self.energies)
        if np.any(np.diff(e) <= 0):
            raise ValueError(f"{self.name}: table energies must be strictly increasing")
        if np.any(np.asarray(self.mu_over_rho) <= 0):
            raise ValueError(f"{self.name}: attenuation coefficients must be positive")
        if e[0] > 1.0 or e[-1] < 100.0:
            raise ValueError(f"{self.name}: table must span at least 1-100 keV")

    @property
    def energy_range(self) -> tuple[float, float]:
        return self.energies[0], self.energies[-1]

    def mass_attenuation(self, energy):
        """(mu/rho)(E) in cm^2/g; accepts scalars or arrays."""
        e = np.asarray(energy, dtype=float)
        lo, hi = self.energy_range
        if np.any(e < lo) or np.any(e > hi):
            raise ValueError(f"{self.name}: energy {energy} keV outside table range [{lo}, {hi}]")
        log_mu = np.interp(np.log(e), np.log(self.energies), np.log(self.mu_over_rho))
        out = np.exp(log_mu)
        return float(out) if out.ndim == 0 else out

    def linear_attenuation(self, energy):
        """mu(E) in 1/cm."""
        return self.mass_attenuation(energy) * self.density


def read_attenuation_table(path) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Parse a two-column ``energy_keV mu_over_rho`` file; ``#`` starts a comment."""
    energies, mus = [], []
    text = path.read_text() if hasattr(path, "read_text") else Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected two columns, got {len(parts)}")
        energies.append(float(parts[0]))
        mus.append(float(parts[1]))
    return tuple(energies), tuple(mus)


def load_material(name: str, density: float, path=None) -> Material:
    if path is None:
        path = resources.files("pepsim") / "data" / f"{name}.txt"
    energies, mus = read_attenuation_table(path)
    return Material(name, density, energies, mus)


@lru_cache(maxsize=None)
def copper() -> Material:
    return load_material("copper", COPPER_DENSITY)


@lru_cache(maxsize=None)
def silicon() -> Material:
    return load_material("silicon", SILICON_DENSITY)


def attenuation_fraction(energy: float, material: Material, path: float) -> float:
    """Beer-Lambert transmitted fraction through ``path`` cm of ``material``."""
    if path < 0:
        raise ValueError(f"path must be non-negative, got {path}")
    mu = material.linear_attenuation(energy)
    return math.exp(-mu * path)
