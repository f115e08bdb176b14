"""Monte Carlo simulator and limit toolkit for underground searches for
Pauli-forbidden X-ray transitions in copper."""

__version__ = "0.1.0"
