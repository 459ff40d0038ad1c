"""Training loop, metrics logging, checkpoints and paired A/B runs."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backmatch import layer_divisors
from .data import STREAM_INIT, BatchPlan, Dataset, batches, load_cifar, stream, synthetic_classification
from .layers import BatchNorm
from .network import Network, build, evaluate
from .optim import DivergenceError, Optimizer, OptimizerConfig, scheduled_rate

CHECKPOINT_MAGIC = b"BMNNCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | cifar10 | cifar100
    path: str | None = None
    train_count: int | None = 5000
    test_count: int | None = 1000
    classes: int = 10
    shape: tuple[int, ...] = (3, 32, 32)
    separation: float = 8.0

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        if self.source not in ("synthetic", "cifar10", "cifar100"):
            raise ValueError(f"unknown data source {self.source!r}")


@dataclass
class TrainConfig:
    arch: str | list = "lenet-bn"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 20
    plan: BatchPlan = field(default_factory=BatchPlan)
    data: DataConfig = field(default_factory=DataConfig)
    eval_every: int = 1
    seed: int = 0
    divergence_threshold: float = 1e4
    metrics_csv: str | None = None
    metrics_jsonl: str | None = None
    checkpoint: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class MetricsRow:
    epoch: int
    step: int
    lr: float
    train_loss: float
    test_loss: float = math.nan
    test_accuracy: float = math.nan
    grad_norms: dict[str, float] = field(default_factory=dict)
    factors: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    def flat(self) -> dict:
        out = {k: getattr(self, k) for k in
               ("epoch", "step", "lr", "train_loss", "test_loss", "test_accuracy")}
        out.update({f"grad_norm[{k}]": v for k, v in self.grad_norms.items()})
        out.update({f"factor[{k}]": v for k, v in self.factors.items()})
        out["seconds"] = self.seconds
        return out


@dataclass
class TrainResult:
    rows: list[MetricsRow]
    network: Network
    batch_digest: str
    init_digest: str


class TrainingDiverged(DivergenceError):
    def __init__(self, message, rows):
        super().__init__(message, {"rows": rows})
        self.rows = rows


def weights_digest(network: Network) -> str:
    h = hashlib.sha256()
    for name, w in network.weights().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
    return h.hexdigest()


def load_datasets(config: TrainConfig) -> tuple[Dataset, Dataset]:
    d = config.data
    if d.source == "synthetic":
        train = synthetic_classification(d.classes, d.train_count or 5000, d.shape,
                                         config.seed, d.separation, "train")
        test = synthetic_classification(d.classes, d.test_count or 1000, d.shape,
                                        config.seed, d.separation, "test")
        return train, test
    variant = 10 if d.source == "cifar10" else 100
    path = d.path or os.environ.get("BMNN_DATA_DIR")
    if not path:
        raise FileNotFoundError(f"{d.source} needs a dataset path (set data.path or BMNN_DATA_DIR)")
    train = load_cifar(path, variant, "train")
    test = load_cifar(path, variant, "test", stats=(train.mean, train.std))
    if d.train_count:
        train = train.subset(d.train_count)
    if d.test_count:
        test = test.subset(d.test_count)
    return train, test


def build_network(config: TrainConfig, train: Dataset) -> Network:
    return build(config.arch, train.images.shape[1:], train.classes,
                 rng=stream(config.seed, STREAM_INIT))


def _grad_norms(grads) -> dict[str, float]:
    return {name: float(np.linalg.norm(g)) for name, g in grads.items()}


def train(config: TrainConfig, datasets: tuple[Dataset, Dataset] | None = None,
          network: Network | None = None) -> TrainResult:
    train_set, test_set = datasets if datasets is not None else load_datasets(config)
    net = network if network is not None else build_network(config, train_set)
    init_digest = weights_digest(net)
    plan = dataclasses.replace(config.plan, seed=config.seed)
    opt = Optimizer(config.optimizer)
    digest = hashlib.sha256()
    rows: list[MetricsRow] = []
    started = time.perf_counter()
    step = 0

    def diverged(msg):
        return TrainingDiverged(msg, rows[-10:])

    for epoch in range(config.epochs):
        lr = scheduled_rate(config.optimizer, epoch)
        losses = []
        bundle = None
        for images, labels in batches(train_set, plan, epoch):
            digest.update(np.ascontiguousarray(images).tobytes())
            digest.update(labels.tobytes())
            bundle = net.forward_backward(images, labels)
            if not math.isfinite(bundle.loss) or bundle.loss > config.divergence_threshold:
                raise diverged(f"loss {bundle.loss} at epoch {epoch}, step {step}")
            if step == 0:
                rows.append(MetricsRow(0, 0, lr, bundle.loss, grad_norms=_grad_norms(bundle.grads),
                                       factors=layer_divisors(net)))
            try:
                opt.step(net, bundle, lr)
            except DivergenceError as exc:
                raise diverged(str(exc)) from exc
            losses.append(bundle.loss)
            step += 1
        row = MetricsRow(epoch, step, lr, float(np.mean(losses)),
                         grad_norms=_grad_norms(bundle.grads), factors=layer_divisors(net))
        if config.eval_every and ((epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs):
            row.test_accuracy, row.test_loss = evaluate(net, test_set.images, test_set.labels)
        row.seconds = time.perf_counter() - started
        rows.append(row)

    result = TrainResult(rows, net, digest.hexdigest(), init_digest)
    write_outputs(config, result)
    return result


def write_outputs(config: TrainConfig, result: TrainResult) -> None:
    if config.metrics_csv:
        write_metrics_csv(config.metrics_csv, result.rows)
    if config.metrics_jsonl:
        write_metrics_jsonl(config.metrics_jsonl, result.rows)
    if config.checkpoint:
        save_checkpoint(config.checkpoint, result.network)


SHARED_FIELDS = ("arch", "epochs", "plan", "data", "seed")


def matched_runs(configs: list[TrainConfig],
                 datasets: tuple[Dataset, Dataset] | None = None) -> list[TrainResult]:
    """Train several configs in sequence from the same initial weights and batch stream."""
    if not configs:
        raise ValueError("need at least one config")
    first = configs[0]
    for other in configs[1:]:
        for name in SHARED_FIELDS:
            if getattr(first, name) != getattr(other, name):
                raise ValueError(f"matched runs must share {name!r}")
    datasets = datasets if datasets is not None else load_datasets(first)
    results = [train(cfg, datasets) for cfg in configs]
    for res in results[1:]:
        if res.init_digest != results[0].init_digest:
            raise RuntimeError("matched runs started from different initial weights")
        if res.batch_digest != results[0].batch_digest:
            raise RuntimeError("matched runs consumed different batches")
    return results


def paired_run(config_a: TrainConfig, config_b: TrainConfig,
               datasets: tuple[Dataset, Dataset] | None = None) -> tuple[TrainResult, TrainResult]:
    """Train two configs from the same initial weights on the same batch stream."""
    a, b = matched_runs([config_a, config_b], datasets)
    return a, b


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    if not rows:
        return
    header = list(rows[0].flat())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.flat().items()})


def write_metrics_jsonl(path, rows: list[MetricsRow]) -> None:
    with open(path, "w") as f:
        for row in rows:
            rec = dataclasses.asdict(row)
            for k in ("test_loss", "test_accuracy"):
                if math.isnan(rec[k]):
                    rec[k] = None
            f.write(json.dumps(rec) + "\n")


def read_metrics_jsonl(path) -> list[MetricsRow]:
    rows = []
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            for k in ("test_loss", "test_accuracy"):
                if rec[k] is None:
                    rec[k] = math.nan
            rows.append(MetricsRow(**rec))
    return rows


def _checkpoint_arrays(network: Network) -> dict[str, np.ndarray]:
    arrays = dict(network.weights())
    for layer in network.layers:
        if isinstance(layer, BatchNorm):
            arrays[f"{layer.name}.running_mean"] = layer.running_mean
            arrays[f"{layer.name}.running_var"] = layer.running_var
    return arrays


def save_checkpoint(path, network_or_arrays) -> None:
    """Write arrays as: magic, u32 version, u32 count, then per array
    u16 name length, name, u32 ndim, u64 dims, little-endian f64 payload."""
    arrays = (_checkpoint_arrays(network_or_arrays) if isinstance(network_or_arrays, Network)
              else network_or_arrays)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode()
            arr = np.asarray(arr, dtype="<f8")
            f.write(struct.pack("<H", len(raw)) + raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + n].decode()
        pos += n
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) * 8
        if pos + size > len(data):
            raise ValueError(f"{path}: truncated payload for {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
        pos += size
    return arrays


def restore_checkpoint(network: Network, arrays: dict[str, np.ndarray]) -> None:
    network.set_weights(arrays)
    for layer in network.layers:
        if isinstance(layer, BatchNorm):
            layer.running_mean = arrays[f"{layer.name}.running_mean"].copy()
            layer.running_var = arrays[f"{layer.name}.running_var"].copy()
