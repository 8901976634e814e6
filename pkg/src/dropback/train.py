"""Training loop, evaluation and metrics logging."""

from __future__ import annotations

import io
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, batches
from .errors import DimensionError, DivergenceError
from .layers import Network, build_network, droppable_layer_indices
from .optim import TrainConfig, lr_at_epoch, scheduled_layer_drop_rate, sgd_step_masked
from .policy import DropDecision, DropPolicy, apply_decision, make_drop_decision
from .tensor import softmax_cross_entropy

log = logging.getLogger(__name__)

# fixed offsets so toggling one mechanism never perturbs another stream
INIT_STREAM = 1
SHUFFLE_STREAM = 2
DROP_STREAM = 3
DROPOUT_STREAM = 4

METRICS_COLUMNS = (
    "epoch",
    "train_loss",
    "train_accuracy",
    "test_loss",
    "test_accuracy",
    "lr",
    "layer_drop_rate",
    "selected_layer_counts",
    "epoch_wall_time_seconds",
)
TIMING_COLUMNS = ("epoch_wall_time_seconds",)


def stream_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1, np.uint64)[0])


def stream_rng(seed: int, stream: int, epoch: int | None = None) -> np.random.Generator:
    key = [seed, stream] if epoch is None else [seed, stream, epoch]
    return np.random.default_rng(key)


def init_network(spec: str, input_shape, seed: int) -> Network:
    """Build ``spec`` with weights drawn from the init stream of ``seed``."""
    return build_network(spec, input_shape, stream_rng(seed, INIT_STREAM))


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_loss: float
    test_accuracy: float
    lr: float
    layer_drop_rate: float
    # one count per droppable layer, in network order
    selected_layer_counts: list = field(default_factory=list)
    epoch_wall_time_seconds: float = 0.0

    def row(self) -> list[str]:
        return [
            str(self.epoch),
            repr(self.train_loss),
            repr(self.train_accuracy),
            repr(self.test_loss),
            repr(self.test_accuracy),
            repr(self.lr),
            repr(self.layer_drop_rate),
            ";".join(str(c) for c in self.selected_layer_counts),
            f"{self.epoch_wall_time_seconds:.6f}",
        ]


def metrics_csv(records, include_timing: bool = True) -> str:
    cols = [c for c in METRICS_COLUMNS if include_timing or c not in TIMING_COLUMNS]
    keep = [METRICS_COLUMNS.index(c) for c in cols]
    buf = io.StringIO()
    buf.write(",".join(cols) + "\n")
    for r in records:
        row = r.row()
        buf.write(",".join(row[i] for i in keep) + "\n")
    return buf.getvalue()


def write_metrics(records, path) -> None:
    with open(path, "w") as f:
        f.write(metrics_csv(records))


def evaluate(net: Network, ds: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Eval-mode loss and accuracy; ties in argmax go to the lowest class."""
    prev = net.mode
    net.eval()
    try:
        loss_sum, correct = 0.0, 0
        for start in range(0, len(ds), batch_size):
            x = ds.inputs[start:start + batch_size]
            y = ds.labels[start:start + batch_size]
            logits = net.forward(x)
            if logits.ndim != 2 or logits.shape[1] != ds.num_classes:
                raise DimensionError(
                    f"network emits {logits.shape[1:]} logits for {ds.num_classes} classes"
                )
            loss, _ = softmax_cross_entropy(logits, y)
            loss_sum += loss * len(y)
            correct += int((np.argmax(logits, axis=1) == y).sum())
    finally:
        net.mode = prev
    return loss_sum / len(ds), correct / len(ds)


class Trainer:
    """Stepwise training of one network, one iteration per :meth:`step`.

    Each iteration runs forward, loss, drop decision, backward, masking and
    the SGD step, in that order. Every random stream is keyed by
    ``(seed, epoch)``, so an epoch's result does not depend on what ran
    before it in the process. ``decide`` can be replaced to force specific
    decisions.
    """

    def __init__(self, cfg: TrainConfig, net: Network, train_ds: Dataset, test_ds: Dataset,
                 policy: DropPolicy | None = None, decide=make_drop_decision):
        self.cfg = cfg
        self.net = net
        self.train_ds = train_ds
        self.test_ds = test_ds
        self.policy = policy if policy is not None else DropPolicy(channel_drop_rate=cfg.channel_drop_rate)
        self.decide = decide
        self.shuffle_seed = stream_seed(cfg.seed, SHUFFLE_STREAM)
        self.droppable = droppable_layer_indices(net)
        self.slot = {layer: i for i, layer in enumerate(self.droppable)}
        self.params = net.params()
        self.epoch = None

    def begin_epoch(self, epoch: int) -> None:
        cfg = self.cfg
        self.epoch = epoch
        self.lr = lr_at_epoch(cfg, epoch)
        self.rate = scheduled_layer_drop_rate(cfg, epoch)
        self.epoch_policy = replace(self.policy, layer_drop_rate=self.rate)
        self.drop_rng = stream_rng(cfg.seed, DROP_STREAM, epoch)
        self.dropout_rng = stream_rng(cfg.seed, DROPOUT_STREAM, epoch)
        self.counts = [0] * len(self.droppable)
        self.loss_sum, self.correct, self.iteration, self.wall = 0.0, 0, 0, 0.0
        self.batches = batches(self.train_ds, cfg.batch_size, epoch, self.shuffle_seed)
        self.net.train()

    def step(self) -> bool:
        """Run one iteration; False once the epoch's batches are exhausted."""
        t0 = time.perf_counter()
        batch = next(self.batches, None)
        if batch is None:
            return False
        x, y = batch
        net = self.net
        logits = net.forward(x, self.dropout_rng)
        loss, grad = softmax_cross_entropy(logits, y)
        if not math.isfinite(loss):
            raise DivergenceError(self.epoch, self.iteration, loss)
        if self.cfg.dropback == "off":
            decision = DropDecision()
        else:
            decision = self.decide(net, self.epoch_policy, self.drop_rng)
        net.backward(grad)
        apply_decision(net, decision)
        sgd_step_masked(self.params, self.lr, self.cfg.momentum, self.cfg.weight_decay)

        if decision.selected_layer is not None:
            self.counts[self.slot[decision.selected_layer]] += 1
        self.loss_sum += loss * len(y)
        self.correct += int((np.argmax(logits, axis=1) == y).sum())
        self.iteration += 1
        self.wall += time.perf_counter() - t0
        return True

    def end_epoch(self) -> MetricsRecord:
        test_loss, test_acc = evaluate(self.net, self.test_ds)
        n = len(self.train_ds)
        rec = MetricsRecord(
            epoch=self.epoch,
            train_loss=self.loss_sum / n,
            train_accuracy=self.correct / n,
            test_loss=test_loss,
            test_accuracy=test_acc,
            lr=self.lr,
            layer_drop_rate=self.rate,
            selected_layer_counts=self.counts,
            epoch_wall_time_seconds=self.wall,
        )
        log.info(
            "epoch %d loss %.4f train_acc %.4f test_acc %.4f lr %.2g drop %.3f (%.2fs)",
            self.epoch, rec.train_loss, rec.train_accuracy, test_acc, self.lr, self.rate, self.wall,
        )
        return rec


def run_training(
    cfg: TrainConfig,
    net: Network,
    train_ds: Dataset,
    test_ds: Dataset,
    policy: DropPolicy | None = None,
    start_epoch: int = 0,
    stop_epoch: int | None = None,
    decide=make_drop_decision,
) -> list[MetricsRecord]:
    """Train ``net`` in place and return one MetricsRecord per epoch.

    ``start_epoch``/``stop_epoch`` allow resuming from a checkpoint; a resumed
    run is identical to an uninterrupted one. Epoch wall time covers the
    iteration loop, including batch fetching and decision sampling, but not
    the end-of-epoch evaluation.
    """
    trainer = Trainer(cfg, net, train_ds, test_ds, policy, decide)
    stop_epoch = cfg.epochs if stop_epoch is None else stop_epoch
    records = []
    for epoch in range(start_epoch, stop_epoch):
        trainer.begin_epoch(epoch)
        while trainer.step():
            pass
        records.append(trainer.end_epoch())
    return records
