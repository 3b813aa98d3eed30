"""Age-of-information model for semi-persistent scheduling in vehicular networks.

The analytical model lives in :mod:`spsaoi.model`; :mod:`spsaoi.optimize`,
:mod:`spsaoi.rl` and :mod:`spsaoi.llmopt` minimise it over (speed, RRI).
"""

from .model import (
    AoiBreakdown,
    ChannelConfig,
    Decision,
    RadioConfig,
    ScenarioConfig,
    aoi,
    check_feasible,
    queuing_delay,
)
from .optimize import GaConfig, Objective, SearchSpace, feasible_speed_interval, ga_optimize, grid_search

__version__ = "0.1.0"

__all__ = [
    "AoiBreakdown",
    "ChannelConfig",
    "Decision",
    "GaConfig",
    "Objective",
    "RadioConfig",
    "ScenarioConfig",
    "SearchSpace",
    "aoi",
    "check_feasible",
    "feasible_speed_interval",
    "ga_optimize",
    "grid_search",
    "queuing_delay",
]
