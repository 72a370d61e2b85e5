from tracesim.simulator.config import ScenarioConfig, validate
from tracesim.simulator.engine import RunResult, error_absorption, run_scenario, write_outputs
from tracesim.simulator.presets import PRESET_NAMES, load_preset

__all__ = [
    "PRESET_NAMES",
    "RunResult",
    "ScenarioConfig",
    "error_absorption",
    "load_preset",
    "run_scenario",
    "validate",
    "write_outputs",
]
