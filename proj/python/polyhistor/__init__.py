"""Python access to the polyhistor C++ core."""

import json

from ._core import (
    ConfigError,
    DimensionError,
    Direction,
    GradientError,
    NumericalError,
    RankError,
    audit,
    backbone_params,
    decomposed_weights,
    delta_up,
    deltaup,
    gradcheck,
    hyperformer_weights,
    methods,
    polyhistor_lite_weights,
    scaled_adapter_weight,
    train,
)
from . import _core


def budget(config, num_tasks=4):
    """Trainable counts per method. `config` is a run-config dict or JSON text."""
    text = config if isinstance(config, str) else json.dumps(config)
    return _core.budget(text, num_tasks)


__all__ = [
    "ConfigError",
    "DimensionError",
    "Direction",
    "GradientError",
    "NumericalError",
    "RankError",
    "audit",
    "backbone_params",
    "budget",
    "decomposed_weights",
    "delta_up",
    "deltaup",
    "gradcheck",
    "hyperformer_weights",
    "methods",
    "polyhistor_lite_weights",
    "scaled_adapter_weight",
    "train",
]
