"""Retrieval-augmented Brownian-bridge diffusion for sparse-to-dense
cross-modal slice volume reconstruction."""

from .schedule import BridgeSchedule, build_schedule, posterior_params
from .config import ExperimentConfig

__all__ = [
    "BridgeSchedule",
    "build_schedule",
    "posterior_params",
    "ExperimentConfig",
]

__version__ = "0.1.0"
