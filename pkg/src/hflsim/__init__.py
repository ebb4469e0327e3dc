"""Deterministic hierarchical federated learning simulator."""

from hflsim.config import ScenarioConfig, flatten, load_and_validate, parse_config
from hflsim.engine import Simulation, SimulationResult, run_simulation

__all__ = [
    "ScenarioConfig",
    "Simulation",
    "SimulationResult",
    "flatten",
    "load_and_validate",
    "parse_config",
    "run_simulation",
]

__version__ = "0.1.0"
