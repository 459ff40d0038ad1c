import math

import numpy as np
import pytest

from bmnn.layers import (
    BatchNorm,
    Conv2d,
    DegenerateBatchError,
    Flatten,
    FullyConnected,
    MaxPool2d,
    MissingCacheError,
    ReLU,
    SoftmaxCrossEntropy,
    loss_forward_backward,
)
from conftest import numerical_grad, rel_error
from gradcheck import LAYER_KINDS, layer_gradient_errors


@pytest.mark.parametrize("kind", LAYER_KINDS)
@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(kind, seed):
    for name, err in layer_gradient_errors(kind, seed).items():
        assert err < 1e-5, (kind, seed, name, err)


def test_relu_forward():
    assert np.array_equal(ReLU().forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])


def test_relu_backward_mask():
    relu = ReLU()
    relu.forward(np.array([[-1.0, 0.5], [2.0, -3.0]]))
    g, gw = relu.backward(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert gw is None
    assert np.array_equal(g, [[0, 2], [3, 0]])


def test_batchnorm_two_values():
    bn = BatchNorm(1, eps=1e-5)
    out = bn.forward(np.array([[1.0, 3.0]]))
    # mean 2, variance 1
    scale = 1 / math.sqrt(1 + 1e-5)
    assert np.allclose(out, [[-scale, scale]], atol=1e-15)


def test_batchnorm_statistics(rng):
    bn = BatchNorm(4)
    x = rng.standard_normal((4, 6, 5, 5)) * 100 + 7
    out = bn.forward(x)
    assert np.max(np.abs(out.mean(axis=(1, 2, 3)))) < 1e-10
    assert np.max(np.abs(out.var(axis=(1, 2, 3)) - 1)) < 1e-6


def test_batchnorm_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        BatchNorm(3).forward(np.ones((3, 1)))


def test_batchnorm_eval_uses_running_stats(rng):
    bn = BatchNorm(2, momentum=0.1)
    x = rng.standard_normal((2, 10)) * 2 + 3
    bn.forward(x)
    assert np.allclose(bn.running_mean, 0.1 * x.mean(axis=1))
    assert np.allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=1, ddof=1))
    y = bn.forward(x, training=False)
    expected = (x - bn.running_mean[:, None]) / np.sqrt(bn.running_var[:, None] + bn.eps)
    assert np.allclose(y, expected)


def test_scalar_conv():
    conv = Conv2d(1, 1, 1, weight=np.full((1, 1, 1, 1), 2.0))
    x = np.arange(12.0).reshape(1, 2, 2, 3)
    assert np.array_equal(conv.forward(x), 2 * x)


def test_fc_identity_passes_gradient(rng):
    fc = FullyConnected(3, 3, weight=np.eye(3))
    fc.forward(rng.standard_normal((3, 4)))
    g = rng.standard_normal((3, 4))
    gx, _ = fc.backward(g)
    assert np.array_equal(gx, g)


def test_fc_weight_gradient_is_batch_sum_of_outer_products(rng):
    fc = FullyConnected(3, 2, weight=rng.standard_normal((2, 3)))
    a = rng.standard_normal((3, 5))
    fc.forward(a)
    db = rng.standard_normal((2, 5))
    _, gw = fc.backward(db)
    expected = sum(np.outer(db[:, i], a[:, i]) for i in range(5))
    assert np.allclose(gw, expected, atol=1e-14)


@pytest.mark.parametrize("layer", [
    FullyConnected(2, 2), Conv2d(1, 1, 1), BatchNorm(2), ReLU(), MaxPool2d(2), Flatten()
])
def test_backward_before_forward(layer):
    with pytest.raises(MissingCacheError):
        layer.backward(np.ones((2, 2)))


def test_conv_forward_matches_nested_loops(rng):
    for seed in range(5):
        r = np.random.default_rng(seed)
        c, n, k, s, p = 2, 3, 3, 1 + seed % 2, seed % 2
        h = w = k + s * 3 - 2 * p
        x = r.standard_normal((c, 2, h, w))
        conv = Conv2d(c, n, k, stride=s, padding=p, weight=r.standard_normal((n, c, k, k)))
        out = conv.forward(x)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        q = (h + 2 * p - k) // s + 1
        ref = np.zeros((n, 2, q, q))
        for o in range(n):
            for b in range(2):
                for u1 in range(q):
                    for u2 in range(q):
                        for j in range(c):
                            for v1 in range(k):
                                for v2 in range(k):
                                    ref[o, b, u1, u2] += (
                                        xp[j, b, u1 * s + v1, u2 * s + v2] * conv.weight[o, j, v1, v2]
                                    )
        assert np.max(np.abs(out - ref)) < 1e-10


def test_maxpool_routes_to_one_input(rng):
    pool = MaxPool2d(2)
    x = rng.standard_normal((2, 3, 4, 6))
    out = pool.forward(x)
    routing = []
    for idx in np.ndindex(out.shape):
        g = np.zeros(out.shape)
        g[idx] = 1.0
        gx, _ = pool.backward(g)
        assert set(np.unique(gx)) <= {0.0, 1.0}
        assert gx.sum() == 1.0
        routing.append(gx.ravel())
    routing = np.array(routing)
    assert set(np.unique(routing.sum(axis=0))) <= {0.0, 1.0}


def test_maxpool_ties_take_first_index():
    pool = MaxPool2d(2)
    x = np.ones((1, 1, 2, 2))
    pool.forward(x)
    gx, _ = pool.backward(np.ones((1, 1, 1, 1)))
    assert np.array_equal(gx[0, 0], [[1, 0], [0, 0]])


def test_loss_uniform_logits():
    loss, _ = loss_forward_backward(np.zeros((7, 3)), [0, 3, 6])
    assert loss == pytest.approx(math.log(7), abs=1e-15)


def test_loss_vanishes_with_margin():
    losses = []
    for margin in (1.0, 10.0, 100.0):
        logits = np.zeros((3, 2))
        logits[1, 0] = logits[2, 1] = margin
        losses.append(loss_forward_backward(logits, [1, 2])[0])
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-40


def test_loss_label_out_of_range():
    with pytest.raises(ValueError):
        loss_forward_backward(np.zeros((3, 2)), [0, 3])


def test_loss_gradient_finite_differences(rng):
    logits = rng.standard_normal((4, 3))
    labels = np.array([0, 3, 1])
    _, grad = loss_forward_backward(logits, labels)
    fd = numerical_grad(lambda: SoftmaxCrossEntropy().forward(logits, labels), logits)
    assert rel_error(grad, fd) < 1e-6


def test_softmax_sums_to_one(rng):
    ce = SoftmaxCrossEntropy()
    ce.forward(rng.standard_normal((5, 8)) * 30, rng.integers(0, 5, 8))
    assert np.max(np.abs(ce.probabilities.sum(axis=0) - 1)) < 1e-12


def test_he_init_scale():
    fc = FullyConnected(400, 300, rng=np.random.default_rng(0))
    assert fc.weight.std() == pytest.approx(np.sqrt(2 / 400), rel=0.02)
