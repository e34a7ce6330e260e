"""Reference parameter sets for the prototype's two views, shipped as data."""

from __future__ import annotations

import json
from importlib import resources

from .model import ViewModelParams

_FILES = {"upper": "table1_upper.json", "lower": "table2_lower.json"}

# Prototype geometry: sensor resolution and nominal fields of view.
SENSOR_WIDTH = 4912
SENSOR_HEIGHT = 3684
AZIMUTH_SPAN_DEG = 270.0
ELEVATION_RANGE_DEG = {"upper": (-50.0, 10.0), "lower": (-20.0, 10.0)}


def fixture_params(view: str) -> ViewModelParams:
    """Load the reference optical model of ``view`` ('upper' or 'lower')."""
    if view not in _FILES:
        raise ValueError(f"view must be 'upper' or 'lower', got {view!r}")
    text = resources.files("osckit.data").joinpath(_FILES[view]).read_text()
    return ViewModelParams.from_dict(json.loads(text))
