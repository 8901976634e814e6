"""Backward-only channel dropping for small numpy networks.

Randomness enters training only through which weight slices receive an update
on a given iteration; the forward pass is never touched, so the trained network
is exactly the deployed one.
"""

from .errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    DropbackError,
    FormatError,
    InputError,
    StateError,
)
from .layers import Network, ParamTensor, build_network, droppable_layer_indices
from .optim import TrainConfig, layer_drop_rate_at_epoch, lr_at_epoch, sgd_step_masked
from .policy import (
    DropDecision,
    DropPolicy,
    apply_update_mask,
    make_drop_decision,
    select_channels,
    select_layer,
)
from .train import Trainer, evaluate, run_training

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DimensionError",
    "DivergenceError",
    "DropDecision",
    "DropPolicy",
    "DropbackError",
    "FormatError",
    "InputError",
    "Network",
    "ParamTensor",
    "StateError",
    "TrainConfig",
    "Trainer",
    "apply_update_mask",
    "build_network",
    "droppable_layer_indices",
    "evaluate",
    "layer_drop_rate_at_epoch",
    "lr_at_epoch",
    "make_drop_decision",
    "run_training",
    "select_channels",
    "select_layer",
    "sgd_step_masked",
]
