"""Feedback and sympathetic cooling of a membrane oscillator: closed-form model,
Langevin simulation, spectral estimation and fitting."""

__version__ = "0.1.0"

from .model import (K_B, HBAR, M_RB87, AtomCouplingParams, AtomDecayModel, CoolingGains,
                    DetectionParams, FeedbackParams, MembraneParams, UnboundedGainError)
from .sim import SimConfig, SimulationDiverged, Trajectory
from .spectral import Spectrum, ZeroSpanTrace
from .fitting import FitResult

__all__ = [
    "__version__", "K_B", "HBAR", "M_RB87", "AtomCouplingParams", "AtomDecayModel",
    "CoolingGains", "DetectionParams", "FeedbackParams", "MembraneParams",
    "UnboundedGainError", "SimConfig", "SimulationDiverged", "Trajectory", "Spectrum",
    "ZeroSpanTrace", "FitResult",
]
