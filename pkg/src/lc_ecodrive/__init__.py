"""Lane-change-aware traffic prediction and eco-driving control for a signalized approach."""

from __future__ import annotations

from .config import ScenarioConfig, load_scenario
from .microsim import ScenarioMetrics, run_scenario

__all__ = ["ScenarioConfig", "ScenarioMetrics", "load_scenario", "run_scenario"]
__version__ = "0.1.0"
