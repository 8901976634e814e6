"""SGD with momentum/weight decay that honours update masks, plus schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError
from .layers import ParamTensor

DROPBACK_MODES = ("on", "off", "fixed")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_milestone_fractions: tuple = (0.3, 0.6, 0.8)
    lr_gamma: float = 0.1
    drop_rate_initial: float = 0.01
    drop_rate_final: float = 0.3
    channel_drop_rate: float = 0.5
    seed: int = 0
    # "on": adaptive ramp, "fixed": drop_rate_final from epoch 0, "off": plain SGD
    dropback: str = "on"
    # constant layer drop rate; replaces the schedule when set
    layer_drop_rate: float | None = None
    dropout_keep_prob: float = 0.7

    def __post_init__(self):
        self.lr_milestone_fractions = tuple(float(f) for f in self.lr_milestone_fractions)
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        fr = self.lr_milestone_fractions
        if any(not 0.0 < f < 1.0 for f in fr):
            raise ConfigError(f"milestone fractions must lie in (0, 1), got {fr}")
        if any(b <= a for a, b in zip(fr, fr[1:])):
            raise ConfigError(f"milestone fractions must be strictly increasing, got {fr}")
        if not 0.0 <= self.drop_rate_initial <= self.drop_rate_final <= 1.0:
            raise ConfigError(
                "need 0 <= drop_rate_initial <= drop_rate_final <= 1, got "
                f"{self.drop_rate_initial}, {self.drop_rate_final}"
            )
        if not 0.0 <= self.channel_drop_rate <= 1.0:
            raise ConfigError(f"channel_drop_rate must be in [0, 1], got {self.channel_drop_rate}")
        if self.dropback not in DROPBACK_MODES:
            raise ConfigError(f"dropback must be one of {DROPBACK_MODES}, got {self.dropback!r}")
        if self.layer_drop_rate is not None and not 0.0 <= self.layer_drop_rate <= 1.0:
            raise ConfigError(f"layer_drop_rate must be in [0, 1], got {self.layer_drop_rate}")
        if not 0.0 < self.dropout_keep_prob <= 1.0:
            raise ConfigError(f"dropout_keep_prob must be in (0, 1], got {self.dropout_keep_prob}")
        if self.seed < 0:
            raise ConfigError(f"seed must be unsigned, got {self.seed}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def milestone_epochs(cfg: TrainConfig) -> list[int]:
    # small guard so e.g. 0.3 * 10 can never floor to 2
    return [math.floor(f * cfg.epochs + 1e-9) for f in cfg.lr_milestone_fractions]


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    lr = cfg.lr0
    for m in milestone_epochs(cfg):
        if m <= epoch:
            lr *= cfg.lr_gamma
    return lr


def layer_drop_rate_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Adaptive layer drop rate.

    Zero before the first milestone, ``drop_rate_initial`` at it, linear up to
    ``drop_rate_final`` at the last milestone and constant after. With a single
    milestone the rate jumps straight to ``drop_rate_final``.
    """
    ms = milestone_epochs(cfg)
    if not ms:
        raise ConfigError("the adaptive drop-rate ramp needs at least one milestone")
    first, last = ms[0], ms[-1]
    if epoch < first:
        return 0.0
    if epoch >= last:
        return cfg.drop_rate_final
    if epoch == first:
        return cfg.drop_rate_initial
    t = (epoch - first) / (last - first)
    return cfg.drop_rate_initial + (cfg.drop_rate_final - cfg.drop_rate_initial) * t


def scheduled_layer_drop_rate(cfg: TrainConfig, epoch: int) -> float:
    if cfg.dropback == "off":
        return 0.0
    if cfg.layer_drop_rate is not None:
        return cfg.layer_drop_rate
    if cfg.dropback == "fixed":
        return cfg.drop_rate_final
    return layer_drop_rate_at_epoch(cfg, epoch)


def sgd_step_masked(params: list[ParamTensor], lr: float, momentum: float, weight_decay: float) -> None:
    """One SGD step; channels masked out by ``apply_update_mask`` stay frozen.

    For updated entries: ``buf = momentum * buf + grad + weight_decay * value``
    then ``value -= lr * buf``. Frozen entries keep both value and buffer.
    Gradients and masks are cleared afterwards.
    """
    for p in params:
        frozen = None
        if p.update_mask is not None:
            dropped = ~p.update_mask
            if dropped.any():
                frozen = (dropped, p.values[dropped], p.momentum[dropped])
            p.update_mask = None
        buf = p.momentum
        buf *= momentum
        buf += p.grad
        buf += weight_decay * p.values
        p.values -= lr * buf
        if frozen is not None:
            dropped, values, mom = frozen
            p.values[dropped] = values
            p.momentum[dropped] = mom
        p.grad[...] = 0.0
