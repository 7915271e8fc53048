"""Knowledge-supported RAN control: a knowledge agent that turns
infrastructure sensor data and a ray-traced channel model into beam,
channel and admission decisions for a mmWave radio access network.
"""

from .scenario import ScenarioConfig, ScenarioError, load_scenario
from .sim import Metrics, SimResult, metrics_csv, run

__all__ = ["Metrics", "ScenarioConfig", "ScenarioError", "SimResult", "load_scenario", "metrics_csv", "run"]
__version__ = "0.1.0"
