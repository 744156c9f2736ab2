"""Poisson tensor decomposition anomaly detection for SCADA analog-scan traffic."""

from scadatensor.errors import (
    ConfigError,
    DataError,
    ScadaTensorError,
    SimulationError,
    SolverError,
)
from scadatensor.sparse_tensor import SparseTensorCOO

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "ScadaTensorError",
    "SimulationError",
    "SolverError",
    "SparseTensorCOO",
    "__version__",
]
