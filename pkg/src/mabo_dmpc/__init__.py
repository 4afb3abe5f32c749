"""Distributed model predictive control with closed-loop parameter learning.

Local MPC problems are coordinated by dual decomposition; their
parameters are tuned from closed-loop performance by per-agent Gaussian
process Bayesian optimization kept in consensus by ADMM.
"""

from .config import ScenarioConfig, parse_scenario, serialize
from .errors import MaboError
from .harness import evaluate_baseline, learn, run_episode
from .scenarios import list_scenarios, load_scenario

__version__ = "0.1.0"

__all__ = [
    "ScenarioConfig", "parse_scenario", "serialize", "MaboError",
    "evaluate_baseline", "learn", "run_episode", "list_scenarios", "load_scenario",
]
