"""Central finite-difference checks of every parameter gradient."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .layers import Network, build_network
from .tensor import softmax_cross_entropy

# (input shape, layer spec, classes); small enough for exhaustive perturbation
DEFAULT_SUITE = (
    ((5,), "dense:6,relu,dense:4,relu,dense:3", 3),
    ((2, 5, 5), "conv:3:3:1:1,relu,flatten,dense:3", 3),
    ((2, 6, 6), "conv:3:3:2:1,relu,avgpool:3,flatten,dense:4", 4),
    ((2, 4, 4), "res:2,flatten,dense:3", 3),
    ((2, 4, 4), "res:3:1,relu,res:3:2,flatten,dense:3", 3),
    ((1, 6, 6), "conv:2:3:1:0,relu,res:2,avgpool:2,flatten,dense:5,relu,dense:3", 3),
)


def ce_loss(logits, labels):
    return softmax_cross_entropy(logits, labels)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise ``|a - n| / (|a| + |n|)``, 0 when both vanish."""
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / max(denom, 1e-300))


def analytic_grads(net: Network, x, y, loss_fn=ce_loss) -> list[np.ndarray]:
    net.train()
    _, g = loss_fn(net.forward(x), y)
    net.backward(g)
    grads = [p.grad.copy() for p in net.params()]
    net.zero_grad()
    return grads


def numeric_grads(net: Network, x, y, epsilon: float, loss_fn=ce_loss) -> list[np.ndarray]:
    net.eval()
    out = []
    for p in net.params():
        g = np.zeros_like(p.values)
        flat, gflat = p.values.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_fn(net.forward(x), y)[0]
            flat[i] = orig - epsilon
            down = loss_fn(net.forward(x), y)[0]
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * epsilon)
        out.append(g)
    net.train()
    return out


def check_network(net: Network, x, y, epsilon: float = 1e-5, loss_fn=ce_loss) -> dict:
    """Relative error per parameter name."""
    a = analytic_grads(net, x, y, loss_fn)
    n = numeric_grads(net, x, y, epsilon, loss_fn)
    return {p.name: relative_error(ga, gn) for p, ga, gn in zip(net.params(), a, n)}


@dataclass
class GradcheckReport:
    tolerance: float
    trials: list = field(default_factory=list)  # (spec, max_err, worst_param)

    @property
    def max_relative_error(self) -> float:
        return max((t[1] for t in self.trials), default=0.0)

    @property
    def passed(self) -> bool:
        return all(t[1] <= self.tolerance for t in self.trials)

    def summary(self) -> str:
        lines = [
            f"trial {i:3d}  {'ok  ' if err <= self.tolerance else 'FAIL'}  "
            f"max_rel_err={err:.3e}  ({worst})  {spec}"
            for i, (spec, err, worst) in enumerate(self.trials)
        ]
        lines.append(
            f"{'PASS' if self.passed else 'FAIL'}: {len(self.trials)} trials, "
            f"max relative error {self.max_relative_error:.3e} (tolerance {self.tolerance:g})"
        )
        return "\n".join(lines)


def random_trial(input_shape, spec, classes, rng, batch: int = 3):
    """Random network (weights and biases perturbed) plus a random batch."""
    net = build_network(spec, input_shape, rng)
    for p in net.params():
        p.values += 0.1 * rng.standard_normal(p.values.shape)
    x = rng.standard_normal((batch,) + tuple(input_shape))
    y = rng.integers(classes, size=batch)
    return net, x, y


def gradcheck_run(net_specs=None, trials: int = 20, epsilon: float = 1e-5,
                  tolerance: float = 1e-5, seed: int = 0) -> GradcheckReport:
    """Run ``trials`` random checks cycling through ``net_specs``."""
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    suite = DEFAULT_SUITE if net_specs is None else net_specs
    rng = np.random.default_rng(seed)
    report = GradcheckReport(tolerance)
    for t in range(trials):
        shape, spec, classes = suite[t % len(suite)]
        net, x, y = random_trial(shape, spec, classes, rng)
        errs = check_network(net, x, y, epsilon)
        worst = max(errs, key=errs.get)
        report.trials.append((spec, errs[worst], worst))
    return report
