"""Command-line harness: ``dropback {train,eval,gradcheck,compare,sweep}``.

Settings come from (lowest to highest precedence) built-in defaults, a
``key = value`` config file given with ``--config``, and ``--key value`` flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .data import gen_blob_images, gen_blobs, load_csv, load_idx, split
from .errors import ConfigError, DropbackError
from .experiments import (
    COMPARISON_COLUMNS,
    SWEEP_COLUMNS,
    VARIANTS,
    compare_run,
    rows_to_csv,
    sweep_channel_rate,
)
from .gradcheck import gradcheck_run
from .optim import TrainConfig
from .policy import CHANNEL_MODES, COUNT_MODES, DropPolicy
from .train import evaluate, init_network, run_training, write_metrics

POLICY_KEYS = ("skip_first_n", "channel_mode", "count_mode")
HARNESS_DEFAULTS = {
    "dataset": "blobs:200,3,8,0.5",
    "test_dataset": None,
    "test_fraction": 0.25,
    "data_seed": 0,
    "net": None,
    "out": "runs/latest",
}


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _parser_for(default):
    if isinstance(default, tuple):
        return lambda s: tuple(float(v) for v in s.split(",") if v.strip())
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def _converters() -> dict:
    conv = {}
    for f in dataclasses.fields(TrainConfig):
        default = f.default if f.default is not dataclasses.MISSING else None
        conv[f.name] = float if f.name == "layer_drop_rate" else _parser_for(default)
    conv["skip_first_n"] = int
    conv["channel_mode"] = str
    conv["count_mode"] = str
    conv["test_fraction"] = float
    conv["data_seed"] = int
    for k in ("dataset", "test_dataset", "net", "out"):
        conv[k] = str
    return conv


CONVERTERS = _converters()


def resolve_settings(file_values: dict, cli_values: dict) -> dict:
    """Merge defaults < config file < CLI, converting strings to typed values."""
    settings = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    settings.update({k: getattr(DropPolicy, k) for k in POLICY_KEYS})
    settings.update(HARNESS_DEFAULTS)
    for source in (file_values, cli_values):
        for key, raw in source.items():
            if raw is None:
                continue
            if key not in CONVERTERS:
                raise ConfigError(f"unknown setting {key!r}")
            try:
                settings[key] = CONVERTERS[key](raw) if isinstance(raw, str) else raw
            except ValueError:
                raise ConfigError(f"bad value {raw!r} for {key}") from None
    return settings


def build_config(settings: dict) -> tuple[TrainConfig, DropPolicy]:
    cfg = TrainConfig(**{k: settings[k] for k in TrainConfig.field_names()})
    policy = DropPolicy(
        channel_drop_rate=cfg.channel_drop_rate,
        **{k: settings[k] for k in POLICY_KEYS},
    )
    return cfg, policy


def load_dataset(text: str, seed: int):
    kind, _, arg = text.partition(":")
    parts = [p.strip() for p in arg.split(",")] if arg else []
    try:
        if kind == "idx" and len(parts) == 2:
            return load_idx(parts[0], parts[1])
        if kind == "csv" and len(parts) == 1:
            return load_csv(parts[0])
        if kind == "blobs" and len(parts) == 4:
            n, k, dim = (int(p) for p in parts[:3])
            return gen_blobs(n, k, dim, float(parts[3]), seed)
        if kind == "blobimg" and len(parts) == 4:
            n, k, side = (int(p) for p in parts[:3])
            return gen_blob_images(n, k, side, float(parts[3]), seed)
    except ValueError as e:
        if isinstance(e, DropbackError):
            raise
        raise ConfigError(f"bad dataset {text!r}: {e}") from None
    raise ConfigError(
        f"bad dataset {text!r}; use idx:<img>,<lbl> | csv:<path> | "
        "blobs:<n>,<k>,<dim>,<spread> | blobimg:<n>,<k>,<side>,<spread>"
    )


def load_data(settings: dict):
    ds = load_dataset(settings["dataset"], settings["data_seed"])
    if settings["test_dataset"]:
        return ds, load_dataset(settings["test_dataset"], settings["data_seed"] + 1)
    return split(ds, settings["test_fraction"], settings["data_seed"])


def default_net_spec(input_shape, num_classes: int) -> str:
    if len(input_shape) == 1:
        return ",".join(["dense:32,relu"] * 5 + [f"dense:{num_classes}"])
    return ",".join(["conv:8:3:1:1,relu"] * 6 + ["avgpool:2", "flatten", f"dense:{num_classes}"])


def net_spec_for(settings: dict, train_ds) -> str:
    return settings["net"] or default_net_spec(train_ds.inputs.shape[1:], train_ds.num_classes)


def write_settings(settings: dict, path) -> None:
    lines = []
    for k, v in settings.items():
        if v is None:
            continue
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_train(settings, args) -> int:
    cfg, policy = build_config(settings)
    train_ds, test_ds = load_data(settings)
    spec = net_spec_for(settings, train_ds)
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    net = init_network(spec, train_ds.inputs.shape[1:], cfg.seed)
    records = run_training(cfg, net, train_ds, test_ds, policy)
    write_metrics(records, out / "metrics.csv")
    save_checkpoint(net, out / "model.cdbk")
    write_settings({**settings, "net": spec}, out / "config.txt")
    last = records[-1]
    print(f"final test accuracy {last.test_accuracy:.4f} after {len(records)} epochs; wrote {out}")
    return 0


def cmd_eval(settings, args) -> int:
    _, test_ds = load_data(settings)
    path = args.checkpoint or Path(settings["out"]) / "model.cdbk"
    net = load_checkpoint(path)
    loss, acc = evaluate(net, test_ds)
    print(f"loss {loss!r} accuracy {acc!r}")
    return 0


def cmd_gradcheck(settings, args) -> int:
    report = gradcheck_run(trials=args.trials, epsilon=args.epsilon,
                           tolerance=args.tolerance, seed=settings["seed"])
    print(report.summary())
    return 0 if report.passed else 1


def cmd_compare(settings, args) -> int:
    cfg, policy = build_config(settings)
    train_ds, test_ds = load_data(settings)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = compare_run(cfg, variants, net_spec_for(settings, train_ds), train_ds, test_ds, policy)
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    text = rows_to_csv(rows, COMPARISON_COLUMNS)
    (out / "comparison.csv").write_text(text)
    print(text, end="")
    return 0


def cmd_sweep(settings, args) -> int:
    cfg, policy = build_config(settings)
    train_ds, test_ds = load_data(settings)
    try:
        rates = [float(r) for r in args.rates.split(",") if r.strip()]
    except ValueError:
        raise ConfigError(f"bad --rates {args.rates!r}") from None
    rows = sweep_channel_rate(cfg, rates, net_spec_for(settings, train_ds), train_ds, test_ds, policy)
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    text = rows_to_csv(rows, SWEEP_COLUMNS)
    (out / "sweep.csv").write_text(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    for key in CONVERTERS:
        flags = [f"--{key}"]
        if "_" in key:
            flags.append(f"--{key.replace('_', '-')}")
        extra = {}
        if key == "dropback":
            extra["choices"] = ("on", "off", "fixed")
        elif key == "channel_mode":
            extra["choices"] = CHANNEL_MODES
        elif key == "count_mode":
            extra["choices"] = COUNT_MODES
        common.add_argument(*flags, dest=key, default=None, metavar="VALUE", **extra)

    parser = argparse.ArgumentParser(prog="dropback", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train one model").set_defaults(func=cmd_train)
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", help="defaults to <out>/model.cdbk")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    p = sub.add_parser("compare", parents=[common], help="train several variants from one init")
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("sweep", parents=[common], help="sweep the channel drop rate")
    p.add_argument("--rates", default="0,0.25,0.5,0.75,1.0")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cli_values = {k: getattr(args, k) for k in CONVERTERS}
        settings = resolve_settings(file_values, cli_values)
        return args.func(settings, args)
    except (DropbackError, OSError) as e:
        print(f"dropback: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
