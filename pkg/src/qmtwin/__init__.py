"""Digital twin and characterization pipeline for a warm-vapor optical quantum memory."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    Calibration, ConfigError, DetectionWindow, ExperimentConfig, PulseSpec, SequenceTiming, SimTruth,
    default_windows, load_config, validate_config,
)
from .metrics import MetricsResult, WindowCounts, compute_metrics  # noqa: E402
from .threshold import classical_threshold  # noqa: E402
from .analysis import analyze  # noqa: E402

__all__ = [
    "Calibration", "ConfigError", "DetectionWindow", "ExperimentConfig", "PulseSpec", "SequenceTiming",
    "SimTruth", "default_windows", "load_config", "validate_config", "MetricsResult", "WindowCounts",
    "compute_metrics", "classical_threshold", "analyze",
]
