"""Numerical toolkit for the discrete adiabatic theorem of quantum maps."""

__version__ = "0.1.0"

from .adiabatic import (  # noqa: E402
    PipelineConfig,
    abel_sum,
    build_trace,
    deviation_series,
    kato_hamiltonian,
    kato_propagator,
)
from .bench import SweepConfig, fit_order, load_config, run_sweep  # noqa: E402
from .models import MODELS, PathSchedule, build_model  # noqa: E402
from .spectral import gap_scan, spectral_decompose, track_branches  # noqa: E402

__all__ = [
    "MODELS", "PathSchedule", "PipelineConfig", "SweepConfig", "abel_sum", "build_model",
    "build_trace", "deviation_series", "fit_order", "gap_scan", "kato_hamiltonian",
    "kato_propagator", "load_config", "run_sweep", "spectral_decompose", "track_branches",
]
