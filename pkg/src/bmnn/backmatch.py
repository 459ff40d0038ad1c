"""Back-matching propagation: exact least-squares solutions and the layer-wise factor walk.

The exact solvers answer, for one layer and one mini-batch, which weight
change and which input change best reproduce the backward signal on the
layer output in the least-squares sense. The factor walk replaces those
solves with per-layer scalar ratios computed from weight norms, which turns
back-matching into a per-layer rescaling of ordinary BP gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import BatchNorm, Conv2d, FullyConnected, Layer, MaxPool2d
from .network import BackwardBundle, Network
from .tensor import as_tensor, col2im, im2col, solve_least_squares

MAX_ORACLE_UNKNOWNS = 512


class DegenerateWeightError(ArithmeticError):
    pass


class CorruptedFactorError(ArithmeticError):
    pass


class OracleTooLargeError(ValueError):
    pass


class NeuronDivisionError(ZeroDivisionError):
    pass


def row_mean_sq_norm(W) -> float:
    """Mean squared row norm of a matrix."""
    W = as_tensor(W)
    if W.ndim != 2 or W.size == 0:
        raise ValueError(f"expected a nonempty matrix, got shape {W.shape}")
    return float(np.sum(W * W) / W.shape[0])


@dataclass
class ExactBackmatchResult:
    delta_prime_W: np.ndarray
    delta_prime_a: np.ndarray
    residuals: dict[str, float]


def _input_solution(numerator, denominator, labels):
    zero = denominator == 0
    if np.any(zero):
        first = labels(np.argwhere(zero)[0])
        raise NeuronDivisionError(f"input {first} has an all-zero interaction vector")
    return numerator / denominator


def exact_backmatch_fc(W, a_batch, delta_b_batch, ridge: float = 0.0) -> ExactBackmatchResult:
    """Least-squares weight and input changes for ``b = W a``.

    ``W`` is ``(out, in)``, ``a_batch`` is ``(in, batch)`` and
    ``delta_b_batch`` is ``(out, batch)``. The weight change solves
    ``(E a a^T + ridge I) X^T = E[a db^T]``; each input unit is matched on
    its own against its outgoing weight column.
    """
    W = as_tensor(W)
    a = as_tensor(a_batch)
    db = as_tensor(delta_b_batch)
    out_dim, in_dim = W.shape
    if a.shape[0] != in_dim or db.shape[0] != out_dim or a.shape[1] != db.shape[1]:
        raise ValueError(f"inconsistent shapes W{W.shape} a{a.shape} db{db.shape}")
    batch = a.shape[1]
    root = np.sqrt(batch)
    delta_W = solve_least_squares(a.T / root, db.T / root, ridge).T

    col_sq = np.sum(W * W, axis=0)
    delta_a = _input_solution((W.T @ db), col_sq[:, None], lambda idx: f"neuron {idx[0]}")

    fit = db - delta_W @ a
    input_res = sum(
        float(np.sum((db - np.outer(W[:, j], delta_a[j])) ** 2)) for j in range(in_dim)
    )
    return ExactBackmatchResult(
        delta_prime_W=delta_W,
        delta_prime_a=delta_a,
        residuals={"weight": float(np.sum(fit * fit)), "input": input_res},
    )


def conv_interaction_sq(layer: Conv2d, input_shape) -> np.ndarray:
    """Squared norm of the weights touching each input location, shape ``(C, H, W)``."""
    c, h, w = input_shape
    kh, kw = layer.kernel_size
    _, q1, q2 = layer.output_shape(input_shape)
    sq_row = (layer.weight_row ** 2).sum(axis=0)
    cols = np.repeat(sq_row[:, None], q1 * q2, axis=1)
    return col2im(cols, (c, h, w), layer.kernel_size, layer.stride, layer.padding)


def exact_backmatch_conv(layer: Conv2d, a_batch, delta_b_batch, ridge: float = 0.0) -> ExactBackmatchResult:
    """Least-squares weight and input changes for a convolution, via im2col.

    ``a_batch`` is ``(C, N, H, W)`` and ``delta_b_batch`` is ``(n, N, q1, q2)``,
    the layer's own activation layout.
    """
    a = as_tensor(a_batch)
    db = as_tensor(delta_b_batch)
    unknowns = layer.weight_row.shape[1]
    if unknowns > MAX_ORACLE_UNKNOWNS:
        raise OracleTooLargeError(
            f"{layer.name}: {unknowns} unknowns per row exceeds the oracle limit {MAX_ORACLE_UNKNOWNS}"
        )
    n_out = layer.out_channels
    sample_shape = (a.shape[0], *a.shape[2:])
    _, q1, q2 = layer.output_shape(sample_shape)
    batch = a.shape[1]
    if db.shape != (n_out, batch, q1, q2):
        raise ValueError(f"delta_b shape {db.shape} does not match conv output {(n_out, batch, q1, q2)}")
    root = np.sqrt(batch)
    cols = im2col(a, layer.kernel_size, layer.stride, layer.padding)
    db_col = db.reshape(n_out, -1)
    X = solve_least_squares(cols.T / root, db_col.T / root, ridge)
    delta_W = X.T.reshape(layer.weight.shape)

    bp_delta_a = col2im(layer.weight_row.T @ db_col, a.shape, layer.kernel_size,
                        layer.stride, layer.padding)
    denom = conv_interaction_sq(layer, sample_shape)
    delta_a = _input_solution(bp_delta_a, denom[:, None],
                              lambda idx: f"location {tuple(int(i) for i in idx)}")

    fit = db_col - X.T @ cols
    return ExactBackmatchResult(
        delta_prime_W=delta_W,
        delta_prime_a=delta_a,
        residuals={"weight": float(np.sum(fit * fit))},
    )


@dataclass
class FactorState:
    """Running backward factor of the top-down walk."""

    m: float = 1.0

    def reset(self) -> None:
        self.m = 1.0

    def update(self, ratio: float) -> None:
        if not ratio > 0:
            raise CorruptedFactorError(f"nonpositive ratio {ratio}")
        self.m *= ratio
        if not (self.m > 0 and np.isfinite(self.m)):
            raise CorruptedFactorError(f"backward factor became {self.m}")


@dataclass
class LayerFactorInfo:
    sharing: float = 1.0
    ratio: float = 1.0
    norms: dict[str, float] = field(default_factory=dict)


def layer_input_shapes(network: Network) -> list[tuple[int, ...]]:
    shapes = []
    shape = network.input_shape
    for layer in network.layers:
        shapes.append(shape)
        shape = layer.output_shape(shape)
    return shapes


def _following_pool(network: Network, index: int) -> MaxPool2d | None:
    for layer in network.layers[index + 1 :]:
        if layer.parametric:
            return None
        if isinstance(layer, MaxPool2d):
            return layer
    return None


def conv_geometry(network: Network, index: int) -> dict[str, float]:
    """Sharing factor ``s`` and pooling factor ``c`` of the convolution at ``index``.

    ``s`` is the number of conv output positions per pooled position group,
    i.e. conv output area over the area of the next pooling window. ``c`` is
    input area over pooled output area.
    """
    layer = network.layers[index]
    in_shape = layer_input_shapes(network)[index]
    _, q1, q2 = layer.output_shape(in_shape)
    pool = _following_pool(network, index)
    pool_area = pool.window ** 2 if pool is not None else 1
    pooled_positions = q1 * q2 / pool_area
    return {
        "sharing": q1 * q2 / pool_area,
        "pooling": in_shape[1] * in_shape[2] / pooled_positions,
    }


def _producer_below(network: Network, index: int) -> Layer | None:
    for layer in reversed(network.layers[:index]):
        if layer.parametric:
            return layer
    return None


def _row_form(layer: Layer) -> np.ndarray:
    return layer.weight_row if isinstance(layer, Conv2d) else layer.weight


def layer_ratio(network: Network, index: int) -> LayerFactorInfo:
    """Ratio of BP input signal to back-matched input signal for one layer."""
    layer = network.layers[index]
    if isinstance(layer, FullyConnected):
        norm = row_mean_sq_norm(layer.weight.T)
        info = LayerFactorInfo(1.0, norm, {"W^T": norm})
    elif isinstance(layer, Conv2d):
        geo = conv_geometry(network, index)
        norm = row_mean_sq_norm(layer.weight_col)
        info = LayerFactorInfo(geo["sharing"], norm / geo["pooling"],
                               {"W_col": norm, "pooling": geo["pooling"]})
    elif isinstance(layer, BatchNorm):
        producer = _producer_below(network, index)
        if producer is None:
            return LayerFactorInfo()
        norm = row_mean_sq_norm(_row_form(producer))
        if norm == 0:
            raise DegenerateWeightError(f"{layer.name}: producer {producer.name} has zero weights")
        info = LayerFactorInfo(1.0, 1.0 / norm, {"W_below": norm})
    else:
        return LayerFactorInfo()
    if not info.ratio > 0:
        raise DegenerateWeightError(f"{layer.name}: zero weight norm")
    return info


@dataclass
class WalkStep:
    name: str
    kind: str
    m: float
    sharing: float
    ratio: float

    @property
    def divisor(self) -> float:
        return self.m * self.sharing


def factor_walk(network: Network) -> list[WalkStep]:
    """Walk from the output layer to the input, recording ``m`` before each layer."""
    state = FactorState()
    steps = []
    for index in range(len(network.layers) - 1, -1, -1):
        layer = network.layers[index]
        info = layer_ratio(network, index)
        steps.append(WalkStep(layer.name, layer.kind, state.m, info.sharing, info.ratio))
        state.update(info.ratio)
    return steps


def layer_divisors(network: Network) -> dict[str, float]:
    """``m * s`` for every parametric layer, keyed by name in network order."""
    by_name = {step.name: step for step in factor_walk(network)}
    return {layer.name: by_name[layer.name].divisor for layer in network.parametric_layers}


def apply_backmatch_scaling(network: Network, gradients) -> dict[str, np.ndarray]:
    """Divide each parametric layer's BP gradient by its ``m * s``."""
    grads = gradients.grads if isinstance(gradients, BackwardBundle) else gradients
    divisors = layer_divisors(network)
    for name, d in divisors.items():
        if not d > 0:
            raise CorruptedFactorError(f"{name}: divisor {d}")
    return {name: grads[name] / divisors[name] for name in divisors}
