"""Per-iteration choice of which weight slices are frozen.

Each iteration at most one parametric layer is selected (with probability
``layer_drop_rate``), and within it a subset of channels/rows has its update
suppressed. Nothing here reads or writes parameter values, so the forward pass
is unaffected by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DropbackError
from .layers import Layer, Network, droppable_layer_indices

CHANNEL_MODES = ("random_subset", "prefix")
COUNT_MODES = ("fixed_count", "bernoulli")


@dataclass(frozen=True)
class DropPolicy:
    layer_drop_rate: float = 0.0
    channel_drop_rate: float = 0.5
    skip_first_n: int = 4
    channel_mode: str = "random_subset"
    count_mode: str = "fixed_count"

    def __post_init__(self):
        for name in ("layer_drop_rate", "channel_drop_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.skip_first_n < 0:
            raise ConfigError(f"skip_first_n must be >= 0, got {self.skip_first_n}")
        if self.channel_mode not in CHANNEL_MODES:
            raise ConfigError(f"channel_mode must be one of {CHANNEL_MODES}, got {self.channel_mode!r}")
        if self.count_mode not in COUNT_MODES:
            raise ConfigError(f"count_mode must be one of {COUNT_MODES}, got {self.count_mode!r}")


@dataclass(frozen=True)
class DropDecision:
    """``update_mask[c]`` is True when channel ``c`` of the selected layer is updated."""

    selected_layer: int | None = None
    update_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def is_empty(self) -> bool:
        return self.selected_layer is None


def round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def drop_count(channel_count: int, channel_drop_rate: float) -> int:
    return min(channel_count, round_half_away(channel_drop_rate * channel_count))


def eligible_layers(net: Network, policy: DropPolicy) -> list[int]:
    return droppable_layer_indices(net)[policy.skip_first_n:]


def select_layer(net: Network, policy: DropPolicy, rng: np.random.Generator) -> int | None:
    eligible = eligible_layers(net, policy)
    if not eligible:
        return None
    if rng.random() >= policy.layer_drop_rate:
        return None
    return eligible[int(rng.integers(len(eligible)))]


def select_channels(channel_count: int, policy: DropPolicy, rng: np.random.Generator) -> np.ndarray:
    if channel_count < 1:
        raise ValueError(f"channel_count must be >= 1, got {channel_count}")
    mask = np.ones(channel_count, dtype=bool)
    if policy.count_mode == "bernoulli":
        mask[rng.random(channel_count) < policy.channel_drop_rate] = False
        return mask
    k = drop_count(channel_count, policy.channel_drop_rate)
    if k == 0:
        return mask
    if policy.channel_mode == "prefix":
        mask[:k] = False
    else:
        mask[rng.choice(channel_count, size=k, replace=False)] = False
    return mask


def make_drop_decision(net: Network, policy: DropPolicy, rng: np.random.Generator) -> DropDecision:
    layer = select_layer(net, policy, rng)
    if layer is None:
        return DropDecision()
    mask = select_channels(net.layers[layer].channel_count, policy, rng)
    return DropDecision(layer, mask)


def apply_update_mask(layer: Layer, update_mask: np.ndarray) -> None:
    """Zero gradient slices of dropped channels and tag the params for the optimizer.

    Only droppable params whose first axis matches the mask length are
    touched; inside a residual block that covers every param of width Cout.
    """
    update_mask = np.asarray(update_mask, dtype=bool)
    matched = [
        p for p in layer.params
        if p.droppable and p.channel_count == update_mask.shape[0]
    ]
    if not matched:
        raise DropbackError(
            f"update mask of length {update_mask.shape[0]} matches no parameter of "
            f"{layer.kind} layer (channel counts {[p.channel_count for p in layer.params]})"
        )
    for p in matched:
        p.grad[~update_mask] = 0.0
        p.update_mask = update_mask


def apply_decision(net: Network, decision: DropDecision) -> None:
    if decision.selected_layer is not None:
        apply_update_mask(net.layers[decision.selected_layer], decision.update_mask)
