"""Variant comparison and channel-drop-rate sweeps.

Every run in one call starts from the same initial weights (same init seed),
so the regularizer is the only thing that differs between rows.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

from .data import Dataset
from .errors import ConfigError
from .layers import Conv2D, Dense, Dropout, Network, ResidualBlock, parse_layers
from .optim import TrainConfig
from .policy import DropPolicy
from .train import INIT_STREAM, Trainer, init_network, run_training, stream_rng

VARIANTS = ("baseline", "dropback_adaptive", "dropback_fixed", "dropback_no_skip", "dropout")


@dataclass
class VariantSetup:
    cfg: TrainConfig
    policy: DropPolicy
    dropout: bool = False


def variant_setup(name: str, cfg: TrainConfig, policy: DropPolicy) -> VariantSetup:
    if name == "baseline":
        return VariantSetup(replace(cfg, dropback="off"), policy)
    if name == "dropback_adaptive":
        return VariantSetup(replace(cfg, dropback="on"), policy)
    if name == "dropback_fixed":
        return VariantSetup(replace(cfg, dropback="fixed"), policy)
    if name == "dropback_no_skip":
        return VariantSetup(replace(cfg, dropback="on"), replace(policy, skip_first_n=0))
    if name == "dropout":
        return VariantSetup(replace(cfg, dropback="off"), policy, dropout=True)
    raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")


def build_variant_network(spec: str, input_shape, seed: int, dropout_keep: float | None = None):
    """Network for ``spec``; with ``dropout_keep`` a Dropout layer goes in
    front of the last parametric layer. Dropout owns no params, so the
    initial weights are the same as without it."""
    layers = parse_layers(spec)
    if dropout_keep is not None:
        parametric = [i for i, l in enumerate(layers) if isinstance(l, (Dense, Conv2D, ResidualBlock))]
        if not parametric:
            raise ConfigError(f"no parametric layer in {spec!r} to put dropout in front of")
        layers.insert(parametric[-1], Dropout(dropout_keep))
    return Network(layers, input_shape, stream_rng(seed, INIT_STREAM))


def compare_run(cfg: TrainConfig, variants, net_spec: str, train_ds: Dataset, test_ds: Dataset,
                policy: DropPolicy | None = None) -> list[dict]:
    """Train every variant and return one result row per variant.

    Variants advance round-robin one iteration at a time, in an order that
    rotates every epoch. Results are the same as training them one after
    another (each variant owns its random streams), but bursts of machine load
    and warm-up effects hit every variant equally, which keeps the epoch-time
    comparison fair.
    """
    variants = list(variants)
    if policy is None:
        policy = DropPolicy(channel_drop_rate=cfg.channel_drop_rate)
    setups = [variant_setup(v, cfg, policy) for v in variants]
    input_shape = train_ds.inputs.shape[1:]
    trainers = []
    for s in setups:
        keep = s.cfg.dropout_keep_prob if s.dropout else None
        net = build_variant_network(net_spec, input_shape, s.cfg.seed, keep)
        trainers.append(Trainer(s.cfg, net, train_ds, test_ds, s.policy))
    records = [[] for _ in trainers]
    for epoch in range(cfg.epochs):
        for t in trainers:
            t.begin_epoch(epoch)
        # rotate the order so no variant always pays for running first
        k = epoch % len(trainers)
        active = trainers[k:] + trainers[:k]
        while active:
            active = [t for t in active if t.step()]
        for t, recs in zip(trainers, records):
            recs.append(t.end_epoch())
    rows = []
    for name, s, recs in zip(variants, setups, records):
        rows.append({
            "variant": name,
            "dropback": s.cfg.dropback,
            "skip_first_n": s.policy.skip_first_n,
            "channel_drop_rate": s.policy.channel_drop_rate,
            "dropout_keep_prob": s.cfg.dropout_keep_prob if s.dropout else "",
            "final_test_accuracy": recs[-1].test_accuracy,
            "mean_epoch_time": sum(r.epoch_wall_time_seconds for r in recs) / len(recs),
            "records": recs,
        })
    return rows


def sweep_channel_rate(cfg: TrainConfig, rates, net_spec: str, train_ds: Dataset, test_ds: Dataset,
                       policy: DropPolicy | None = None) -> list[dict]:
    """One run per channel drop rate, all from the same initial weights."""
    if policy is None:
        policy = DropPolicy(channel_drop_rate=cfg.channel_drop_rate)
    rates = [float(r) for r in rates]
    for r in rates:
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"channel drop rate {r} outside [0, 1]")
    input_shape = train_ds.inputs.shape[1:]
    rows = []
    for r in rates:
        net = init_network(net_spec, input_shape, cfg.seed)
        run_cfg = replace(cfg, channel_drop_rate=r)
        records = run_training(run_cfg, net, train_ds, test_ds, replace(policy, channel_drop_rate=r))
        rows.append({"rate": r, "final_test_accuracy": records[-1].test_accuracy, "records": records})
    return rows


def rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([row[c] if not isinstance(row[c], float) else repr(row[c]) for c in columns])
    return buf.getvalue()


COMPARISON_COLUMNS = (
    "variant", "dropback", "skip_first_n", "channel_drop_rate", "dropout_keep_prob",
    "final_test_accuracy", "mean_epoch_time",
)
SWEEP_COLUMNS = ("rate", "final_test_accuracy")
