"""Random-geometry finite-difference checks shared by the layer tests and the acceptance suite."""

import numpy as np

from bmnn.layers import BatchNorm, Conv2d, Flatten, FullyConnected, MaxPool2d, ReLU
from conftest import numerical_grad, rel_error

LAYER_KINDS = ("fc", "conv", "bn2d", "bn4d", "relu", "pool", "flatten")


def random_case(kind, seed):
    """Build a layer and an input of random small geometry."""
    r = np.random.default_rng(seed)
    if kind == "fc":
        i, o, b = r.integers(1, 7, size=3)
        return FullyConnected(i, o, weight=r.standard_normal((o, i))), r.standard_normal((i, b))
    if kind == "conv":
        c, n, k = r.integers(1, 4, size=3)
        s, p = int(r.integers(1, 3)), int(r.integers(0, 2))
        q1, q2 = r.integers(1, 4, size=2)
        if k + s * (min(q1, q2) - 1) - 2 * p < 1:
            p = 0
        h, w = k + s * (q1 - 1) - 2 * p, k + s * (q2 - 1) - 2 * p
        layer = Conv2d(c, n, int(k), stride=s, padding=p, weight=r.standard_normal((n, c, k, k)))
        return layer, r.standard_normal((c, int(r.integers(1, 4)), h, w))
    if kind == "bn2d":
        f, b = int(r.integers(1, 6)), int(r.integers(2, 8))
        return BatchNorm(f), r.standard_normal((f, b)) * 3 + 1
    if kind == "bn4d":
        c, b, h, w = int(r.integers(1, 4)), int(r.integers(2, 4)), *r.integers(1, 4, size=2)
        return BatchNorm(c), r.standard_normal((c, b, h, w)) * 2 - 1
    if kind == "relu":
        x = r.standard_normal(tuple(r.integers(1, 5, size=2)))
        # keep the kink out of the finite-difference stencil
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
        return ReLU(), x
    if kind == "pool":
        k = int(r.integers(1, 4))
        c, b = r.integers(1, 3, size=2)
        h, w = k * r.integers(1, 4, size=2)
        return MaxPool2d(k), r.standard_normal((c, b, h, w))
    if kind == "flatten":
        return Flatten(), r.standard_normal(tuple(r.integers(1, 4, size=4)))
    raise ValueError(kind)


def layer_gradient_errors(kind, seed, h=1e-5):
    """Return relative errors of analytic vs central-difference gradients (input, weight)."""
    layer, x = random_case(kind, seed)
    out = layer.forward(x)
    R = np.random.default_rng(seed + 10_000).standard_normal(out.shape)

    def loss():
        return float(np.sum(layer.forward(x) * R))

    gx, gw = layer.backward(R)
    errors = {"input": rel_error(gx, numerical_grad(loss, x, h))}
    if gw is not None:
        errors["weight"] = rel_error(gw, numerical_grad(loss, layer.weight, h))
    return errors
