"""Connecting orbits by boundary-value continuation with smoothly continued eigenspaces."""

from .collocation import Mesh
from .continuation import ContinuationSettings
from .models import get_model
from .orbits import ConnectingOrbitProblem, OrbitState, ScheduleSettings, run_schedule

__all__ = [
    "ConnectingOrbitProblem",
    "ContinuationSettings",
    "Mesh",
    "OrbitState",
    "ScheduleSettings",
    "get_model",
    "run_schedule",
]
__version__ = "0.1.0"
