"""Layer types with hand-written forward and backward passes.

Fully connected layers and everything after a ``Flatten`` carry activations
as ``(features, batch)``. Convolutional stages carry ``(channels, batch,
height, width)`` so that im2col columns and conv outputs need no transposes.
No layer has a bias term, and batch normalization has no trainable affine
part.
"""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, as_tensor, col2im, conv_output_size, im2col


class MissingCacheError(RuntimeError):
    """backward() was called without a matching training-mode forward()."""


class DegenerateBatchError(ValueError):
    """Batch statistics cannot be formed from the given batch."""


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Layer:
    """Base class. Subclasses set ``parametric`` and implement the passes."""

    parametric = False
    kind = "layer"

    def __init__(self, name: str | None = None):
        self.name = name or self.kind
        self._cache = None

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(input_shape)

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_output: np.ndarray):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise MissingCacheError(f"{self.name}: backward called before a training forward")
        return self._cache

    def __repr__(self) -> str:
        return f"{type(self).__name__}(name={self.name!r})"


class FullyConnected(Layer):
    """``b = W a`` with ``W`` of shape ``(out_dim, in_dim)``."""

    parametric = True
    kind = "fc"

    def __init__(self, in_dim: int, out_dim: int, weight=None, rng=None, name=None):
        super().__init__(name)
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        if weight is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            weight = he_normal(rng, (self.out_dim, self.in_dim), self.in_dim)
        self.weight = as_tensor(weight).copy()
        if self.weight.shape != (self.out_dim, self.in_dim):
            raise DimensionError(
                f"{self.name}: weight shape {self.weight.shape} != {(self.out_dim, self.in_dim)}"
            )

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_dim,):
            raise DimensionError(f"{self.name}: expects input ({self.in_dim},), got {input_shape}")
        return (self.out_dim,)

    def forward(self, x, training=True):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[0] != self.in_dim:
            raise DimensionError(f"{self.name}: expects ({self.in_dim}, batch), got {x.shape}")
        if training:
            self._cache = x
        return self.weight @ x

    def backward(self, grad_output):
        a = self._take_cache()
        grad_w = grad_output @ a.T
        return self.weight.T @ grad_output, grad_w


class Conv2d(Layer):
    """Cross-correlation with weight ``(out_channels, in_channels, kh, kw)``."""

    parametric = True
    kind = "conv"

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size,
        stride: int = 1,
        padding: int = 0,
        weight=None,
        rng=None,
        name=None,
    ):
        super().__init__(name)
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) else kernel_size
        if min(in_channels, out_channels, kh, kw) < 1 or stride < 1 or padding < 0:
            raise ValueError(f"{self.name}: invalid convolution geometry")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = (int(kh), int(kw))
        self.stride = int(stride)
        self.padding = int(padding)
        shape = (self.out_channels, self.in_channels, *self.kernel_size)
        if weight is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            weight = he_normal(rng, shape, self.in_channels * kh * kw)
        self.weight = as_tensor(weight).copy()
        if self.weight.shape != shape:
            raise DimensionError(f"{self.name}: weight shape {self.weight.shape} != {shape}")

    @property
    def weight_row(self) -> np.ndarray:
        """``(n, m*kh*kw)`` view: one row per output feature."""
        return self.weight.reshape(self.out_channels, -1)

    @property
    def weight_col(self) -> np.ndarray:
        """``(m, n*kh*kw)`` matrix: one row per input feature."""
        return self.weight.transpose(1, 0, 2, 3).reshape(self.in_channels, -1)

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise DimensionError(
                f"{self.name}: expects ({self.in_channels}, H, W), got {tuple(input_shape)}"
            )
        _, h, w = input_shape
        kh, kw = self.kernel_size
        return (
            self.out_channels,
            conv_output_size(h, kh, self.stride, self.padding),
            conv_output_size(w, kw, self.stride, self.padding),
        )

    def forward(self, x, training=True):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[0] != self.in_channels:
            raise DimensionError(
                f"{self.name}: expects ({self.in_channels}, batch, H, W), got {x.shape}"
            )
        n = x.shape[1]
        _, q1, q2 = self.output_shape((x.shape[0], *x.shape[2:]))
        cols = im2col(x, self.kernel_size, self.stride, self.padding)
        out = self.weight_row @ cols
        if training:
            self._cache = (x.shape, cols)
        return out.reshape(self.out_channels, n, q1, q2)

    def backward(self, grad_output, need_input_grad: bool = True):
        in_shape, cols = self._take_cache()
        g = grad_output.reshape(self.out_channels, -1)
        grad_w = (g @ cols.T).reshape(self.weight.shape)
        if not need_input_grad:
            return None, grad_w
        grad_cols = self.weight_row.T @ g
        grad_x = col2im(grad_cols, in_shape, self.kernel_size, self.stride, self.padding)
        return grad_x, grad_w


class BatchNorm(Layer):
    """Per-channel standardization without learnable scale or shift."""

    kind = "bn"

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1, name=None):
        super().__init__(name)
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.num_features = int(num_features)
        self.eps = eps
        self.momentum = momentum
        self.running_mean = np.zeros(self.num_features)
        self.running_var = np.ones(self.num_features)

    def output_shape(self, input_shape):
        if input_shape[0] != self.num_features:
            raise DimensionError(
                f"{self.name}: expects {self.num_features} channels, got {tuple(input_shape)}"
            )
        return tuple(input_shape)

    def _axes(self, x):
        if x.ndim == 2:
            return (1,), (-1, 1)
        if x.ndim == 4:
            return (1, 2, 3), (-1, 1, 1, 1)
        raise DimensionError(f"{self.name}: expects a 2-d or 4-d input, got {x.shape}")

    def forward(self, x, training=True):
        x = as_tensor(x)
        axes, bshape = self._axes(x)
        if x.shape[0] != self.num_features:
            raise DimensionError(f"{self.name}: expects {self.num_features} channels, got {x.shape}")
        if not training:
            mean = self.running_mean.reshape(bshape)
            var = self.running_var.reshape(bshape)
            return (x - mean) / np.sqrt(var + self.eps)

        batch = x.shape[1]
        if batch < 2:
            raise DegenerateBatchError(f"{self.name}: training mode needs batch >= 2, got {batch}")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        count = x.size // self.num_features
        self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
        self.running_var = (1 - self.momentum) * self.running_var + self.momentum * (
            var * count / (count - 1)
        )
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        self._cache = (xhat, inv_std, mean, var)
        return xhat

    @property
    def batch_mean(self):
        return self._take_cache()[2]

    @property
    def batch_var(self):
        return self._take_cache()[3]

    def backward(self, grad_output):
        xhat, inv_std, _, _ = self._take_cache()
        axes, bshape = self._axes(grad_output)
        # mean path, variance path and direct path of the chain rule
        g_mean = grad_output.mean(axis=axes, keepdims=True)
        gx_mean = (grad_output * xhat).mean(axis=axes, keepdims=True)
        grad_x = (grad_output - g_mean - xhat * gx_mean) * inv_std.reshape(bshape)
        return grad_x, None


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=True):
        x = as_tensor(x)
        mask = x >= 0
        if training:
            self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, grad_output):
        mask = self._take_cache()
        return grad_output * mask, None


class MaxPool2d(Layer):
    """Non-overlapping square max pooling (stride == window)."""

    kind = "pool"

    def __init__(self, window: int = 2, name=None):
        super().__init__(name)
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = int(window)

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise DimensionError(f"{self.name}: expects (C, H, W), got {tuple(input_shape)}")
        c, h, w = input_shape
        k = self.window
        if h % k or w % k:
            raise DimensionError(f"{self.name}: window {k} does not divide {h}x{w}")
        return (c, h // k, w // k)

    def forward(self, x, training=True):
        x = as_tensor(x)
        if x.ndim != 4:
            raise DimensionError(f"{self.name}: expects a 4-d input, got {x.shape}")
        c, n, h, w = x.shape
        self.output_shape((c, h, w))
        k = self.window
        blocks = x.reshape(c, n, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(c, n, h // k, w // k, k * k)
        # argmax returns the first maximal index in row-major window order
        idx = blocks.argmax(axis=-1)
        if training:
            self._cache = (x.shape, idx)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad_output):
        shape, idx = self._take_cache()
        c, n, h, w = shape
        k = self.window
        blocks = np.zeros((c, n, h // k, w // k, k * k))
        np.put_along_axis(blocks, idx[..., None], grad_output[..., None], axis=-1)
        grad_x = blocks.reshape(c, n, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return grad_x.reshape(shape), None


class Flatten(Layer):
    """``(C, batch, H, W)`` to ``(C*H*W, batch)``; features ordered ``(C, H, W)``."""

    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=True):
        x = as_tensor(x)
        if training:
            self._cache = x.shape
        c, n, h, w = x.shape
        return x.transpose(0, 2, 3, 1).reshape(c * h * w, n)

    def backward(self, grad_output):
        c, n, h, w = self._take_cache()
        return grad_output.reshape(c, h, w, n).transpose(0, 3, 1, 2), None


class SoftmaxCrossEntropy:
    """Mean cross-entropy over a batch of ``(classes, batch)`` logits."""

    def __init__(self):
        self._cache = None

    def forward(self, logits, labels) -> float:
        logits = as_tensor(logits)
        labels = np.asarray(labels, dtype=np.int64)
        if logits.ndim != 2 or labels.shape != (logits.shape[1],):
            raise DimensionError(f"logits {logits.shape} and labels {labels.shape} disagree")
        classes = logits.shape[0]
        if labels.size and (labels.min() < 0 or labels.max() >= classes):
            raise ValueError(f"labels must lie in [0, {classes})")
        shifted = logits - logits.max(axis=0, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
        log_p = shifted - log_z
        cols = np.arange(labels.size)
        loss = -log_p[labels, cols].mean()
        self._cache = (np.exp(log_p), labels)
        return float(loss)

    @property
    def probabilities(self):
        if self._cache is None:
            raise MissingCacheError("loss backward before forward")
        return self._cache[0]

    def backward(self) -> np.ndarray:
        if self._cache is None:
            raise MissingCacheError("loss backward before forward")
        probs, labels = self._cache
        grad = probs.copy()
        grad[labels, np.arange(labels.size)] -= 1.0
        return grad / labels.size


def loss_forward_backward(logits, labels) -> tuple[float, np.ndarray]:
    loss_layer = SoftmaxCrossEntropy()
    loss = loss_layer.forward(logits, labels)
    return loss, loss_layer.backward()
