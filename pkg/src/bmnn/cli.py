"""Command-line front end.

Settings come from three places, later ones winning: built-in defaults, a
TOML config file (``--config``), and command-line flags. Exit codes are
0 on success, 1 on divergence, 2 for configuration errors and 3 for I/O
errors.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import backmatch
from .data import (
    CIFAR_FILES,
    BatchPlan,
    DatasetError,
    synthetic_classification,
    write_cifar_binary,
)
from .layers import Conv2d, FullyConnected
from .network import ConstructionError, Network, build, evaluate
from .optim import DivergenceError, OptimizerConfig, Rule, step_schedule
from .trainer import (
    DataConfig,
    TrainConfig,
    build_network,
    load_checkpoint,
    load_datasets,
    matched_runs,
    restore_checkpoint,
    train,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    type: type
    default: object
    help: str


KEYS: dict[str, Key] = {
    "arch": Key(str, "lenet-bn", "architecture preset"),
    "layers": Key(list, None, "explicit layer list (overrides arch)"),
    "rule": Key(str, "sgd", "update rule: sgd, backmatch, lars, lsalr"),
    "lr": Key(float, 0.1, "global learning rate"),
    "momentum": Key(float, 0.9, "momentum coefficient"),
    "nesterov": Key(bool, True, "Nesterov momentum"),
    "weight_decay": Key(float, 0.0, "weight-decay coefficient"),
    "schedule": Key(list, None, "explicit [[epoch, factor], ...] triggers"),
    "schedule_period": Key(int, 0, "multiply the rate every N epochs (0 = off)"),
    "schedule_factor": Key(float, 0.2, "factor for schedule_period"),
    "epochs": Key(int, 20, "training epochs"),
    "batch": Key(int, 128, "mini-batch size"),
    "shuffle": Key(bool, True, "shuffle every epoch"),
    "flip_prob": Key(float, 0.0, "horizontal flip probability"),
    "eval_every": Key(int, 1, "evaluate on the test split every N epochs (0 = never)"),
    "seed": Key(int, 0, "master seed"),
    "dataset": Key(str, "synthetic", "synthetic, cifar10 or cifar100"),
    "data_dir": Key(str, None, "CIFAR directory (default: $BMNN_DATA_DIR)"),
    "train_count": Key(int, 5000, "training images used (0 = all)"),
    "test_count": Key(int, 1000, "test images used (0 = all)"),
    "classes": Key(int, 10, "classes for synthetic data"),
    "input_shape": Key(list, [3, 32, 32], "sample shape for synthetic data"),
    "separation": Key(float, 8.0, "distance between synthetic class means"),
    "metrics_csv": Key(str, None, "metrics CSV path"),
    "metrics_jsonl": Key(str, None, "metrics JSON-lines path"),
    "checkpoint": Key(str, None, "checkpoint path"),
    "compare_rule": Key(str, None, "second rule for a paired run"),
    "compare_lr": Key(float, None, "learning rate of the second rule"),
    "lr_pool": Key(list, None, "candidate learning rates, trained one after another"),
}


def _check_type(key: str, value):
    expected = KEYS[key].type
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool):
        raise ConfigError(f"{key}: expected int, got bool")
    if not isinstance(value, expected):
        raise ConfigError(f"{key}: expected {expected.__name__}, got {type(value).__name__}")
    return value


def load_config_file(path) -> dict:
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for key in doc:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
    return {k: _check_type(k, v) for k, v in doc.items()}


def resolve_settings(file_values: dict, flag_values: dict) -> dict:
    settings = {k: spec.default for k, spec in KEYS.items()}
    settings.update(file_values)
    settings.update({k: v for k, v in flag_values.items() if v is not None})
    return settings


def settings_to_config(s: dict, rule=None, lr=None, suffix: str = "") -> TrainConfig:
    rule = rule or s["rule"]
    try:
        rule = Rule(rule)
    except ValueError as exc:
        raise ConfigError(f"rule: unknown rule {rule!r}") from exc
    if s["schedule"] is not None:
        schedule = s["schedule"]
        if not all(isinstance(item, list) and len(item) == 2 for item in schedule):
            raise ConfigError("schedule: expected [[epoch, factor], ...]")
        schedule = [tuple(item) for item in schedule]
    elif s["schedule_period"]:
        schedule = step_schedule(s["schedule_period"], s["schedule_factor"], s["epochs"])
    else:
        schedule = []

    def out(path):
        if not path or not suffix:
            return path
        p = Path(path)
        return str(p.with_name(f"{p.stem}.{suffix}{p.suffix}"))

    try:
        return TrainConfig(
            arch=s["layers"] if s["layers"] is not None else s["arch"],
            optimizer=OptimizerConfig(
                rule=rule,
                learning_rate=lr if lr is not None else s["lr"],
                momentum=s["momentum"],
                nesterov=s["nesterov"],
                weight_decay=s["weight_decay"],
                schedule=schedule,
            ),
            epochs=s["epochs"],
            plan=BatchPlan(batch_size=s["batch"], seed=s["seed"], shuffle=s["shuffle"],
                           flip_prob=s["flip_prob"]),
            data=DataConfig(
                source=s["dataset"],
                path=s["data_dir"],
                train_count=s["train_count"] or None,
                test_count=s["test_count"] or None,
                classes=s["classes"],
                shape=tuple(s["input_shape"]),
                separation=s["separation"],
            ),
            eval_every=s["eval_every"],
            seed=s["seed"],
            metrics_csv=out(s["metrics_csv"]),
            metrics_jsonl=out(s["metrics_jsonl"]),
            checkpoint=out(s["checkpoint"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _json_list(text: str) -> list:
    try:
        value = json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"not valid JSON: {exc}") from exc
    if not isinstance(value, list):
        raise argparse.ArgumentTypeError("expected a JSON list")
    return value


def _add_setting_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--preset", dest="arch", help=KEYS["arch"].help)
    p.add_argument("--layers", type=_json_list, help="layer list as JSON")
    p.add_argument("--schedule", type=_json_list, help="[[epoch, factor], ...] as JSON")
    p.add_argument("--rule", help=KEYS["rule"].help)
    p.add_argument("--lr", type=float, help=KEYS["lr"].help)
    p.add_argument("--momentum", type=float, help=KEYS["momentum"].help)
    p.add_argument("--nesterov", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--schedule-period", type=int)
    p.add_argument("--schedule-factor", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--shuffle", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--flip-prob", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset")
    p.add_argument("--data-dir")
    p.add_argument("--train-count", type=int)
    p.add_argument("--test-count", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--input-shape", type=int, nargs="+", help=KEYS["input_shape"].help)
    p.add_argument("--separation", type=float)
    p.add_argument("--metrics-csv")
    p.add_argument("--metrics-jsonl")
    p.add_argument("--checkpoint")
    p.add_argument("--json", action="store_true", help="machine-readable output")


def _settings(args) -> dict:
    file_values = load_config_file(args.config) if args.config else {}
    flags = {k: getattr(args, k, None) for k in KEYS}
    return resolve_settings(file_values, flags)


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _row_summary(row) -> dict:
    return {
        "epoch": row.epoch,
        "step": row.step,
        "lr": row.lr,
        "train_loss": row.train_loss,
        "test_loss": _clean(row.test_loss),
        "test_accuracy": _clean(row.test_accuracy),
    }


def cmd_train(args) -> int:
    s = _settings(args)
    if s["compare_rule"] and s["lr_pool"]:
        raise ConfigError("compare_rule and lr_pool cannot be combined")
    if s["compare_rule"]:
        configs = [settings_to_config(s, suffix=s["rule"]),
                   settings_to_config(s, rule=s["compare_rule"], lr=s["compare_lr"],
                                      suffix=s["compare_rule"])]
    elif s["lr_pool"]:
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in s["lr_pool"]):
            raise ConfigError("lr_pool: expected a list of numbers")
        configs = [settings_to_config(s, lr=float(v), suffix=f"lr{v:g}") for v in s["lr_pool"]]
    else:
        configs = [settings_to_config(s)]
    results = matched_runs(configs) if len(configs) > 1 else [train(configs[0])]
    runs = []
    lines = []
    for cfg, res in zip(configs, results):
        run = {
            "rule": cfg.optimizer.rule.value,
            "lr": cfg.optimizer.learning_rate,
            "initial": _row_summary(res.rows[0]),
            "final": _row_summary(res.rows[-1]),
            "metrics_csv": cfg.metrics_csv,
            "metrics_jsonl": cfg.metrics_jsonl,
            "checkpoint": cfg.checkpoint,
            "batch_digest": res.batch_digest,
        }
        runs.append(run)
        f = run["final"]
        lines.append(f"{run['rule']:>10}  lr={run['lr']:g}  initial loss {run['initial']['train_loss']:.4f}"
                     f"  final loss {f['train_loss']:.4f}  test acc {f['test_accuracy']}")
    _emit(args, {"status": "ok", "runs": runs}, "\n".join(lines))
    return EXIT_OK


def cmd_eval(args) -> int:
    s = _settings(args)
    if not s["checkpoint"]:
        raise ConfigError("checkpoint: eval needs --checkpoint")
    cfg = settings_to_config(s)
    train_set, test_set = load_datasets(cfg)
    net = build_network(cfg, train_set)
    restore_checkpoint(net, load_checkpoint(cfg.checkpoint))
    accuracy, loss = evaluate(net, test_set.images, test_set.labels)
    _emit(args, {"accuracy": accuracy, "loss": loss, "count": len(test_set)},
          f"accuracy {accuracy:.4f}  loss {loss:.4f}  on {len(test_set)} samples")
    return EXIT_OK


def lenet_closed_form(network: Network) -> dict[str, float]:
    """Per-layer gradient multipliers for the BN-LeNet written out layer by layer."""
    n = backmatch.row_mean_sq_norm
    fc1, fc2, fc3 = (network.layer(k).weight for k in ("fc1", "fc2", "fc3"))
    cv1, cv2 = network.layer("cv1"), network.layer("cv2")
    top = n(fc3.T) * n(fc2.T) * n(fc1.T)
    return {
        "fc3": 1.0,
        "fc2": n(fc2) / n(fc3.T),
        "fc1": n(fc2) * n(fc1) / (n(fc3.T) * n(fc2.T)),
        "cv2": n(fc2) * n(fc1) * n(cv2.weight_row) / (25 * top),
        "cv1": n(fc2) * n(fc1) * n(cv2.weight_row) * n(cv1.weight_row)
        / (25 * top * n(cv2.weight_col)),
    }


def verify_factors(network: Network, seed: int = 0, batch: int = 8) -> list[dict]:
    """Per-layer factor table plus the measured scaled/BP gradient ratio."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, *network.input_shape))
    labels = rng.integers(0, network.num_classes, size=batch)
    bundle = network.forward_backward(x, labels)
    scaled = backmatch.apply_backmatch_scaling(network, bundle)
    closed = {}
    if {"cv1", "cv2", "fc1", "fc2", "fc3"} <= {l.name for l in network.parametric_layers} \
            and len(network.parametric_layers) == 5:
        closed = lenet_closed_form(network)
    rows = []
    for step in reversed(backmatch.factor_walk(network)):
        row = {"name": step.name, "kind": step.kind, "sharing": step.sharing,
               "ratio": step.ratio, "m": step.m, "grad_ratio": None,
               "closed_form": None, "rel_diff": None}
        if step.name in scaled:
            bp = bundle.grads[step.name]
            row["grad_ratio"] = float(np.linalg.norm(scaled[step.name]) / np.linalg.norm(bp))
            if step.name in closed:
                row["closed_form"] = closed[step.name]
                row["rel_diff"] = abs(row["grad_ratio"] - closed[step.name]) / closed[step.name]
        rows.append(row)
    return rows


def cmd_verify_factors(args) -> int:
    s = _settings(args)
    arch = s["layers"] if s["layers"] is not None else s["arch"]
    shape = tuple(s["input_shape"])
    net = build(arch, shape, s["classes"], seed=s["seed"])
    rows = verify_factors(net, s["seed"])

    def fmt(v):
        return "-" if v is None else f"{v:.6g}"

    lines = [f"{'layer':<10}{'kind':<8}{'s':>10}{'r':>14}{'m':>14}{'scaled/BP':>14}"
             f"{'closed form':>14}{'rel diff':>12}"]
    for r in rows:
        lines.append(f"{r['name']:<10}{r['kind']:<8}{fmt(r['sharing']):>10}{fmt(r['ratio']):>14}"
                     f"{fmt(r['m']):>14}{fmt(r['grad_ratio']):>14}{fmt(r['closed_form']):>14}"
                     f"{fmt(r['rel_diff']):>12}")
    _emit(args, {"arch": arch if isinstance(arch, str) else "custom", "layers": rows},
          "\n".join(lines))
    return EXIT_OK


def _rel_error(approx, exact) -> float:
    denom = np.linalg.norm(exact)
    return float(np.linalg.norm(approx - exact) / denom) if denom else float(np.linalg.norm(approx))


def whiten_rows(a: np.ndarray) -> np.ndarray:
    """Rescale a ``(dim, batch)`` block so that its mean outer product is the identity."""
    q, _ = np.linalg.qr(a.T)
    return q.T * np.sqrt(a.shape[1])


def compare_oracle(in_dim: int = 16, out_dim: int = 8, batch: int = 64, channels: int = 2,
                   out_channels: int = 3, kernel: int = 2, size: int = 5, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    cases = []

    def fc_case(name, W, a, whitened):
        db = rng.standard_normal((out_dim, batch))
        exact = backmatch.exact_backmatch_fc(W, a, db)
        bp_w = db @ a.T / batch
        bp_a = W.T @ db
        approx_a = bp_a / backmatch.row_mean_sq_norm(W.T)
        cases.append({"name": name, "layer": "fc", "whitened": whitened,
                      "weight_rel_error": _rel_error(bp_w, exact.delta_prime_W),
                      "input_rel_error": _rel_error(approx_a, exact.delta_prime_a)})

    W = rng.standard_normal((out_dim, in_dim))
    fc_case("fc-whitened", W, whiten_rows(rng.standard_normal((in_dim, batch))), True)
    Wu = W / np.linalg.norm(W, axis=0, keepdims=True)
    fc_case("fc-unit-columns", Wu, rng.standard_normal((in_dim, batch)), False)
    fc_case("fc-random", W, rng.standard_normal((in_dim, batch)) * 2.0 + 0.5, False)

    layer = Conv2d(channels, out_channels, kernel, weight=rng.standard_normal(
        (out_channels, channels, kernel, kernel)), name="conv")
    if layer.weight_row.shape[1] > backmatch.MAX_ORACLE_UNKNOWNS:
        raise backmatch.OracleTooLargeError("conv geometry exceeds the oracle limit")
    a = rng.standard_normal((channels, batch, size, size))
    _, q1, q2 = layer.output_shape((channels, size, size))
    db = rng.standard_normal((out_channels, batch, q1, q2))
    exact = backmatch.exact_backmatch_conv(layer, a, db)
    layer.forward(a)
    bp_a, bp_w = layer.backward(db)
    bp_w = bp_w / batch
    sharing = q1 * q2
    pooling = size * size / (q1 * q2)
    approx_a = bp_a / (backmatch.row_mean_sq_norm(layer.weight_col) / pooling)
    cases.append({"name": "conv-random", "layer": "conv", "whitened": False,
                  "weight_rel_error": _rel_error(bp_w / sharing, exact.delta_prime_W),
                  "input_rel_error": _rel_error(approx_a, exact.delta_prime_a)})
    return cases


def cmd_compare_oracle(args) -> int:
    cases = compare_oracle(args.in_dim, args.out_dim, args.batch, args.channels,
                           args.out_channels, args.kernel, args.size, args.seed)
    lines = [f"{'case':<18}{'weight rel err':>16}{'input rel err':>16}"]
    lines += [f"{c['name']:<18}{c['weight_rel_error']:>16.3e}{c['input_rel_error']:>16.3e}"
              for c in cases]
    _emit(args, {"cases": cases}, "\n".join(lines))
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = CIFAR_FILES[10]
    splits = {"train": args.train_count, "test": args.test_count}
    for split, count in splits.items():
        ds = synthetic_classification(args.classes, count, (3, 32, 32), args.seed,
                                      args.separation, split)
        pixels = np.clip(np.rint(128 + 16 * ds.images), 0, 255).astype(np.uint8)
        chunks = np.array_split(np.arange(count), len(files[split]))
        for name, idx in zip(files[split], chunks):
            write_cifar_binary(out / name, pixels[idx], ds.labels[idx], 10)
    _emit(args, {"path": str(out), "train": splits["train"], "test": splits["test"]},
          f"wrote {splits['train']} train / {splits['test']} test records to {out}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bmnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one network or a paired comparison")
    _add_setting_flags(p)
    p.add_argument("--compare-rule", help=KEYS["compare_rule"].help)
    p.add_argument("--compare-lr", type=float, help=KEYS["compare_lr"].help)
    p.add_argument("--lr-pool", type=float, nargs="+", help=KEYS["lr_pool"].help)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_setting_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-factors", help="print the per-layer back-matching factors")
    _add_setting_flags(p)
    p.set_defaults(func=cmd_verify_factors)

    p = sub.add_parser("compare-oracle", help="approximate vs exact back-matching")
    p.add_argument("--in-dim", type=int, default=16)
    p.add_argument("--out-dim", type=int, default=8)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--out-channels", type=int, default=3)
    p.add_argument("--kernel", type=int, default=2)
    p.add_argument("--size", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_compare_oracle)

    p = sub.add_parser("make-synthetic", help="write a synthetic dataset in CIFAR-10 binary layout")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--train-count", type=int, default=5000)
    p.add_argument("--test-count", type=int, default=1000)
    p.add_argument("--separation", type=float, default=8.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ConstructionError, backmatch.OracleTooLargeError) as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
