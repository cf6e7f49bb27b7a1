"""Python bindings for the smoe attention-sink toolkit."""

import json as _json

from ._core import (
    CheckpointError,
    ConfigError,
    Model,
    NumericError,
    attention,
    aux_loss_finetune,
    aux_loss_scratch,
    coefficient_of_variation,
    head_imbalance,
    select_top_m_heads,
    verify,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "Model",
    "NumericError",
    "attention",
    "aux_loss_finetune",
    "aux_loss_scratch",
    "coefficient_of_variation",
    "config_of",
    "head_imbalance",
    "select_top_m_heads",
    "verify",
]


def config_of(model):
    """Resolved run config of a Model as a dict."""
    return _json.loads(model.config)
