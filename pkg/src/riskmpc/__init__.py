"""Indirect-feedback stochastic MPC with risk-averse constraints."""

from .errors import RiskMPCError
from .model import LinearStochasticSystem, QuadCost, RiskConstraints, SynthesisResult, synthesize
from .risk import RiskKind, RiskSpec, empirical_risk, gaussian_risk, risk_coefficient

__all__ = [
    "LinearStochasticSystem",
    "QuadCost",
    "RiskConstraints",
    "RiskKind",
    "RiskMPCError",
    "RiskSpec",
    "SynthesisResult",
    "empirical_risk",
    "gaussian_risk",
    "risk_coefficient",
    "synthesize",
]

__version__ = "0.1.0"
