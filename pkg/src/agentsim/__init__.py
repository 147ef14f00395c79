"""Agent-based simulation engine with numba kernels and a numpy fallback."""

from .analysis import TimeSeries, emit_csv, read_csv
from .engine.simulation import Driver, SimConfig, SimulationReport, simulate
from .models import PRESETS, get_preset

__version__ = "0.1.0"

__all__ = ["Driver", "SimConfig", "SimulationReport", "simulate", "TimeSeries", "emit_csv", "read_csv",
           "PRESETS", "get_preset"]
