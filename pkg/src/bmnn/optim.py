"""Update rules: SGD, back-matching scaling, LARS and LSALR, with momentum and weight decay."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum

import numpy as np

from .backmatch import layer_divisors
from .network import BackwardBundle, Network

log = logging.getLogger(__name__)


class Rule(str, Enum):
    SGD = "sgd"
    BACKMATCH = "backmatch"
    LARS = "lars"
    LSALR = "lsalr"


class DivergenceError(ArithmeticError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def step_schedule(period: int, factor: float, epochs: int) -> list[tuple[int, float]]:
    """Triggers multiplying the rate by ``factor`` every ``period`` epochs."""
    return [(e, factor) for e in range(period, epochs + 1, period)]


@dataclass
class OptimizerConfig:
    rule: Rule = Rule.SGD
    learning_rate: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 0.0
    schedule: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        self.rule = Rule(self.rule)
        self.schedule = [(int(e), float(f)) for e, f in self.schedule]
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


def scheduled_rate(config: OptimizerConfig, epoch: int) -> float:
    """Base rate times every multiplier whose trigger epoch has been reached.

    The product is formed in decimal on the shortest repr of each number, so
    0.1 with two 0.2 drops gives 0.004 rather than 0.004000000000000001.
    """
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    rate = Decimal(repr(config.learning_rate))
    for trigger, factor in config.schedule:
        if trigger <= epoch:
            rate *= Decimal(repr(factor))
    return float(rate)


def modified_gradient(rule, raw_grad: np.ndarray, weights: np.ndarray, divisor: float = 1.0) -> np.ndarray:
    """Apply one update rule to an (already weight-decayed) layer gradient.

    ``divisor`` is the back-matching ``m * s`` of the layer and is only used
    by the back-matching rule.
    """
    rule = Rule(rule)
    if rule is Rule.SGD:
        return raw_grad
    if rule is Rule.BACKMATCH:
        return raw_grad / divisor
    grad_norm = float(np.linalg.norm(raw_grad))
    if grad_norm == 0.0:
        log.warning("%s: zero gradient norm, leaving gradient unscaled", rule.value)
        return raw_grad
    if rule is Rule.LARS:
        return raw_grad * (float(np.linalg.norm(weights)) / grad_norm)
    return raw_grad * (1.0 + math.log(1.0 + 1.0 / grad_norm))


class Optimizer:
    """Holds the velocity buffers and applies one update per call to :meth:`step`."""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.velocity: dict[str, np.ndarray] = {}
        self.last_divisors: dict[str, float] = {}

    def modified_gradients(self, network: Network, bundle: BackwardBundle) -> dict[str, np.ndarray]:
        cfg = self.config
        divisors = layer_divisors(network) if cfg.rule is Rule.BACKMATCH else {}
        self.last_divisors = divisors
        out = {}
        for layer in network.parametric_layers:
            g = bundle.grads[layer.name]
            if cfg.weight_decay:
                g = g + cfg.weight_decay * layer.weight
            out[layer.name] = modified_gradient(cfg.rule, g, layer.weight,
                                                divisors.get(layer.name, 1.0))
        return out

    def step(self, network: Network, bundle: BackwardBundle, lr: float | None = None) -> None:
        cfg = self.config
        lr = cfg.learning_rate if lr is None else lr
        grads = self.modified_gradients(network, bundle)
        updates = {}
        for layer in network.parametric_layers:
            g = grads[layer.name]
            v = self.velocity.get(layer.name)
            v = cfg.momentum * v + g if v is not None else g.copy()
            updates[layer.name] = (v, g + cfg.momentum * v if cfg.nesterov else v)
        new_weights = {}
        for layer in network.parametric_layers:
            w = layer.weight - lr * updates[layer.name][1]
            if not np.all(np.isfinite(w)):
                raise DivergenceError(
                    f"non-finite update in layer {layer.name}",
                    {"layer": layer.name, "loss": bundle.loss, "lr": lr},
                )
            new_weights[layer.name] = w
        for layer in network.parametric_layers:
            layer.weight = new_weights[layer.name]
            self.velocity[layer.name] = updates[layer.name][0]


def step(network: Network, bundle: BackwardBundle, config: OptimizerConfig,
         velocity: dict[str, np.ndarray], lr: float | None = None) -> None:
    """Functional form of :meth:`Optimizer.step`; ``velocity`` is updated in place."""
    opt = Optimizer(config)
    opt.velocity = velocity
    opt.step(network, bundle, lr)
