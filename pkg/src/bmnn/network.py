"""Sequential network container, architecture presets and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import (
    BatchNorm,
    Conv2d,
    Flatten,
    FullyConnected,
    Layer,
    MaxPool2d,
    ReLU,
    SoftmaxCrossEntropy,
)
from .tensor import DimensionError, ShapeError, as_tensor


class ConstructionError(ValueError):
    """An architecture does not compose."""


VGG_CONFIGS = {
    "vgg11-bn": [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    "vgg13-bn": [64, 64, "M", 128, 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    "vgg16-bn": [64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
                 512, 512, 512, "M", 512, 512, 512, "M"],
    "vgg19-bn": [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
                 512, 512, 512, 512, "M", 512, 512, 512, 512, "M"],
}

LENET_WIDTHS = {
    "lenet-bn": (20, 50, 500, 500),
    "lenet-bn-mini": (6, 16, 64, 64),
}

PRESETS = tuple(LENET_WIDTHS) + tuple(VGG_CONFIGS)


@dataclass
class BackwardBundle:
    """Regular-BP output for one mini-batch.

    ``grads`` maps each parametric layer name to its mean gradient, in
    network order (bottom to top).
    """

    loss: float
    grads: dict[str, np.ndarray]
    deltas: dict[str, np.ndarray] = field(default_factory=dict)


class Network:
    def __init__(self, layers: list[Layer], input_shape, num_classes: int):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.loss_layer = SoftmaxCrossEntropy()
        self._check()

    def _check(self):
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConstructionError(f"layer names must be unique: {names}")
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except (DimensionError, ShapeError) as exc:
                raise ConstructionError(f"junction {i} ({layer.name}): {exc}") from exc
        if shape != (self.num_classes,):
            raise ConstructionError(
                f"network output shape {shape} does not match {self.num_classes} classes"
            )
        for i, layer in enumerate(self.layers):
            if not isinstance(layer, BatchNorm):
                continue
            below_ok = i == 0 or self.layers[i - 1].parametric
            above_ok = i + 1 < len(self.layers) and isinstance(self.layers[i + 1], ReLU)
            if not (below_ok and above_ok):
                raise ConstructionError(
                    f"junction {i} ({layer.name}): batch norm must sit between a "
                    "parametric layer and its ReLU"
                )

    @property
    def parametric_layers(self) -> list[Layer]:
        return [layer for layer in self.layers if layer.parametric]

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def weights(self) -> dict[str, np.ndarray]:
        return {layer.name: layer.weight for layer in self.parametric_layers}

    def set_weights(self, weights: dict[str, np.ndarray]) -> None:
        for layer in self.parametric_layers:
            w = as_tensor(weights[layer.name])
            if w.shape != layer.weight.shape:
                raise DimensionError(f"{layer.name}: weight shape {w.shape} != {layer.weight.shape}")
            layer.weight = w.copy()

    def parameter_count(self) -> int:
        return sum(layer.weight.size for layer in self.parametric_layers)

    def _enter(self, x):
        x = as_tensor(x)
        if x.shape[1:] != self.input_shape:
            raise DimensionError(f"batch shape {x.shape} does not match input {self.input_shape}")
        # datasets are sample-major; layers want the batch axis second
        if len(self.input_shape) == 1:
            return x.T
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3))

    def forward(self, x, training: bool = True) -> np.ndarray:
        out = self._enter(x)
        for layer in self.layers:
            out = layer.forward(out, training)
        return out

    def backward(self, grad_logits, keep_deltas: bool = False):
        grads: dict[str, np.ndarray] = {}
        deltas: dict[str, np.ndarray] = {}
        g = grad_logits
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i == 0 and isinstance(layer, Conv2d) and not keep_deltas:
                g, gw = layer.backward(g, need_input_grad=False)
            else:
                g, gw = layer.backward(g)
            if gw is not None:
                grads[layer.name] = gw
            if keep_deltas:
                deltas[layer.name] = g
        ordered = {layer.name: grads[layer.name] for layer in self.parametric_layers}
        return ordered, deltas

    def forward_backward(self, batch, labels, keep_deltas: bool = False) -> BackwardBundle:
        logits = self.forward(batch, training=True)
        loss = self.loss_layer.forward(logits, labels)
        grads, deltas = self.backward(self.loss_layer.backward(), keep_deltas)
        return BackwardBundle(loss=loss, grads=grads, deltas=deltas)

    def predict_logits(self, x, batch_size: int = 500) -> np.ndarray:
        x = as_tensor(x)
        parts = [self.forward(x[i : i + batch_size], training=False)
                 for i in range(0, x.shape[0], batch_size)]
        return np.concatenate(parts, axis=1)


def forward_backward(network: Network, batch, labels, keep_deltas: bool = False) -> BackwardBundle:
    return network.forward_backward(batch, labels, keep_deltas)


def evaluate(network: Network, images, labels, batch_size: int = 500) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy with batch norm in evaluation mode."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = network.predict_logits(images, batch_size)
    loss = SoftmaxCrossEntropy().forward(logits, labels)
    accuracy = float(np.mean(logits.argmax(axis=0) == labels))
    return accuracy, loss


def _lenet_layers(widths, in_channels, num_classes, rng):
    c1, c2, f1, f2 = widths
    return [
        Conv2d(in_channels, c1, 5, rng=rng, name="cv1"),
        BatchNorm(c1, name="bn_cv1"),
        ReLU(name="relu_cv1"),
        MaxPool2d(2, name="pool1"),
        Conv2d(c1, c2, 5, rng=rng, name="cv2"),
        BatchNorm(c2, name="bn_cv2"),
        ReLU(name="relu_cv2"),
        MaxPool2d(2, name="pool2"),
        Flatten(name="flatten"),
        FullyConnected(c2 * 5 * 5, f1, rng=rng, name="fc1"),
        BatchNorm(f1, name="bn_fc1"),
        ReLU(name="relu_fc1"),
        FullyConnected(f1, f2, rng=rng, name="fc2"),
        BatchNorm(f2, name="bn_fc2"),
        ReLU(name="relu_fc2"),
        FullyConnected(f2, num_classes, rng=rng, name="fc3"),
    ]


def _vgg_layers(config, in_channels, spatial, num_classes, rng):
    layers: list[Layer] = []
    channels = in_channels
    conv_i = pool_i = 0
    for item in config:
        if item == "M":
            pool_i += 1
            layers.append(MaxPool2d(2, name=f"pool{pool_i}"))
            spatial //= 2
            continue
        conv_i += 1
        name = f"cv{conv_i}"
        layers += [
            Conv2d(channels, item, 3, padding=1, rng=rng, name=name),
            BatchNorm(item, name=f"bn_{name}"),
            ReLU(name=f"relu_{name}"),
        ]
        channels = item
    layers += [
        Flatten(name="flatten"),
        FullyConnected(channels * spatial * spatial, num_classes, rng=rng, name="fc"),
    ]
    return layers


def _custom_layers(specs, input_shape, rng):
    layers: list[Layer] = []
    shape = tuple(input_shape)
    counts: dict[str, int] = {}
    for i, spec in enumerate(specs):
        spec = dict(spec)
        kind = spec.pop("type")
        counts[kind] = counts.get(kind, 0) + 1
        name = spec.pop("name", f"{kind}{counts[kind]}")
        try:
            if kind == "fc":
                in_dim = spec.pop("in", shape[0])
                layer = FullyConnected(in_dim, spec.pop("out"), rng=rng, name=name)
            elif kind == "conv":
                in_ch = spec.pop("in", shape[0])
                layer = Conv2d(
                    in_ch,
                    spec.pop("out"),
                    spec.pop("kernel"),
                    stride=spec.pop("stride", 1),
                    padding=spec.pop("padding", 0),
                    rng=rng,
                    name=name,
                )
            elif kind == "bn":
                layer = BatchNorm(shape[0], eps=spec.pop("eps", 1e-5), name=name)
            elif kind == "relu":
                layer = ReLU(name=name)
            elif kind == "pool":
                layer = MaxPool2d(spec.pop("window", 2), name=name)
            elif kind == "flatten":
                layer = Flatten(name=name)
            else:
                raise ConstructionError(f"layer {i}: unknown layer type {kind!r}")
            if spec:
                raise ConstructionError(f"layer {i} ({name}): unknown keys {sorted(spec)}")
            shape = layer.output_shape(shape)
        except (DimensionError, ShapeError) as exc:
            raise ConstructionError(f"junction {i} ({name}): {exc}") from exc
        except KeyError as exc:
            raise ConstructionError(f"layer {i} ({name}): missing key {exc}") from exc
        layers.append(layer)
    return layers


def build(arch, input_shape=(3, 32, 32), num_classes: int = 10, seed: int = 0, rng=None) -> Network:
    """Build a network from a preset name or an explicit list of layer specs.

    Layer specs are mappings such as ``{"type": "conv", "out": 20, "kernel": 5}``,
    ``{"type": "bn"}``, ``{"type": "relu"}``, ``{"type": "pool", "window": 2}``,
    ``{"type": "flatten"}`` or ``{"type": "fc", "out": 10}``. Input sizes are
    inferred from the preceding layer unless given as ``"in"``.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    input_shape = tuple(int(d) for d in input_shape)
    if isinstance(arch, str):
        if arch in LENET_WIDTHS:
            if input_shape[1:] != (32, 32):
                raise ConstructionError(f"{arch} expects 32x32 inputs, got {input_shape}")
            layers = _lenet_layers(LENET_WIDTHS[arch], input_shape[0], num_classes, rng)
        elif arch in VGG_CONFIGS:
            if len(input_shape) != 3 or input_shape[1] != input_shape[2]:
                raise ConstructionError(f"{arch} expects square image inputs, got {input_shape}")
            layers = _vgg_layers(VGG_CONFIGS[arch], input_shape[0], input_shape[1],
                                 num_classes, rng)
        else:
            raise ConstructionError(f"unknown preset {arch!r}; choose from {', '.join(PRESETS)}")
    else:
        layers = _custom_layers(arch, input_shape, rng)
    return Network(layers, input_shape, num_classes)
