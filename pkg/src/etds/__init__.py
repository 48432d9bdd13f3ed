"""Event-triggered distributed stabilization of interconnected multiagent systems under DoS."""

from .dos import DoSParams, DoSSchedule, generate_schedule, is_active, verify_features, xi_bar, xi_theta
from .model import AgentDynamics, LayerGraph, MasSystem, Nonlinearity, build_hc, build_laplacian
from .scenario import load_scenario, write_scenario
from .simulator import Scenario, TrajectoryLog, simulate
from .synthesis import (DesignWeights, GainSet, build_validation_matrix, compute_rates, solve_care,
                        solve_lyapunov, synthesize)
from .trigger import TriggerParams

__version__ = "0.1.0"

__all__ = [
    "AgentDynamics", "DesignWeights", "DoSParams", "DoSSchedule", "GainSet", "LayerGraph", "MasSystem",
    "Nonlinearity", "Scenario", "TrajectoryLog", "TriggerParams", "build_hc", "build_laplacian",
    "build_validation_matrix", "compute_rates", "generate_schedule", "is_active", "load_scenario",
    "simulate", "solve_care", "solve_lyapunov", "synthesize", "verify_features", "write_scenario",
    "xi_bar", "xi_theta",
]
