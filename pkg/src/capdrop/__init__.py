"""Freeway ramp metering under capacity-drop hysteresis.

Cell transmission simulator with a hysteretic congestion flag, a relaxed
LP controller, an exact mixed-integer controller, a rule-based controller,
two-cell throughput and horizon analysis, and a closed-loop harness.
"""

from .analysis import (HorizonBudget, TwoCellAnalysis, check_prop1,
                       critical_density, horizon_budget)
from .controllers import ControllerConfig, ControlPlan, RolloutProblem, plan
from .harness import RunRecord, run_closed_loop
from .io import bundled, load_scenario
from .model import (CellParams, Network, NetworkState, RampParams, Scenario,
                    simulate, step)

__version__ = "0.1.0"

__all__ = [
    "CellParams", "ControlPlan", "ControllerConfig", "HorizonBudget",
    "Network", "NetworkState", "RampParams", "RolloutProblem", "RunRecord",
    "Scenario", "TwoCellAnalysis", "bundled", "check_prop1",
    "critical_density", "horizon_budget", "load_scenario", "plan",
    "run_closed_loop", "simulate", "step",
]
