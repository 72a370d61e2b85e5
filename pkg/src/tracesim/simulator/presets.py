"""Bundled reference scenarios."""

from __future__ import annotations

import json
from importlib import resources

from tracesim.errors import UnknownPreset
from tracesim.simulator.config import ScenarioConfig

PRESET_NAMES = ("clinical", "industrial", "judicial")


def preset_data(name: str) -> dict:
    if name not in PRESET_NAMES:
        raise UnknownPreset(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    text = resources.files("tracesim.simulator").joinpath("presets", f"{name}.json").read_text("utf-8")
    return json.loads(text)


def load_preset(name: str) -> ScenarioConfig:
    return ScenarioConfig.from_dict(preset_data(name))
