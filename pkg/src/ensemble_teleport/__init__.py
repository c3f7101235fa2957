"""Simulation and analysis of quantum-state teleportation between two atomic-ensemble memories."""

from .protocol import SIX_TARGETS, BellOutcome, TargetState
from .simulator import NoiseConfig, TimingConfig

__version__ = "0.1.0"

__all__ = ["SIX_TARGETS", "BellOutcome", "NoiseConfig", "TargetState", "TimingConfig", "__version__"]
