import math

import numpy as np
import pytest

from bmnn.backmatch import conv_geometry
from bmnn.layers import BatchNorm, Conv2d, FullyConnected, ReLU, SoftmaxCrossEntropy
from bmnn.network import ConstructionError, Network, build, evaluate
from bmnn.tensor import DimensionError
from conftest import numerical_grad, rel_error


def test_lenet_spatial_chain():
    net = build("lenet-bn", (3, 32, 32), 10)
    shape = net.input_shape
    spatial = {}
    for layer in net.layers:
        shape = layer.output_shape(shape)
        if len(shape) == 3:
            spatial[layer.name] = shape[1]
    assert [spatial[k] for k in ("cv1", "pool1", "cv2", "pool2")] == [28, 14, 10, 5]
    idx = {layer.name: i for i, layer in enumerate(net.layers)}
    assert conv_geometry(net, idx["cv1"])["sharing"] == 196
    assert conv_geometry(net, idx["cv2"])["sharing"] == 25


def test_vgg11_cifar100_head():
    net = build("vgg11-bn", (3, 32, 32), 100)
    fc = net.layers[-1]
    assert isinstance(fc, FullyConnected)
    assert fc.weight.shape == (100, 512)
    assert sum(isinstance(layer, FullyConnected) for layer in net.layers) == 1


def test_single_fc_spec():
    net = build([{"type": "fc", "out": 3}], (5,), 3)
    assert len(net.layers) == 1
    assert isinstance(net.layers[0], FullyConnected)
    assert net.layers[0].name == "fc1"


# closed-form counts: 5x5 or 3x3 kernels, no biases, parameter-free batch norm
@pytest.mark.parametrize("arch,count", [
    ("lenet-bn", 3 * 20 * 25 + 20 * 50 * 25 + 1250 * 500 + 500 * 500 + 500 * 10),
    ("lenet-bn-mini", 33186),
    ("vgg11-bn", 9222848),
    ("vgg13-bn", 9407168),
    ("vgg16-bn", 14715584),
    ("vgg19-bn", 20024000),
])
def test_parameter_counts(arch, count):
    assert build(arch, (3, 32, 32), 10).parameter_count() == count


def test_lenet_count_pinned():
    assert build("lenet-bn", (3, 32, 32), 10).parameter_count() == 906500


def test_unknown_preset():
    with pytest.raises(ConstructionError):
        build("resnet", (3, 32, 32), 10)


def test_shape_mismatch_names_junction():
    with pytest.raises(ConstructionError, match="junction 1"):
        build([{"type": "fc", "out": 4}, {"type": "fc", "in": 5, "out": 2}], (3,), 2)


def test_unknown_key_rejected():
    with pytest.raises(ConstructionError, match="unknown keys"):
        build([{"type": "fc", "out": 2, "bias": True}], (3,), 2)


def test_output_must_match_classes():
    with pytest.raises(ConstructionError):
        build([{"type": "fc", "out": 4}], (3,), 2)


def test_bn_must_precede_activation():
    with pytest.raises(ConstructionError):
        Network([FullyConnected(3, 3), BatchNorm(3, name="bn"), FullyConnected(3, 2, name="out")], (3,), 2)
    with pytest.raises(ConstructionError):
        Network([FullyConnected(3, 3), ReLU(), BatchNorm(3, name="bn"), ReLU(name="r2"),
                 FullyConnected(3, 2, name="out")], (3,), 2)


def test_duplicate_names_rejected():
    with pytest.raises(ConstructionError):
        Network([FullyConnected(3, 3, name="a"), ReLU(), FullyConnected(3, 2, name="a")], (3,), 2)


def toy_net(rng):
    return Network([
        FullyConnected(4, 5, weight=rng.standard_normal((5, 4)), name="fc1"),
        BatchNorm(5, name="bn1"), ReLU(name="relu1"),
        FullyConnected(5, 3, weight=rng.standard_normal((3, 5)), name="fc2"),
    ], (4,), 3)


def network_fd_errors(net, x, y):
    bundle = net.forward_backward(x, y)
    errs = {}
    for layer in net.parametric_layers:
        fd = numerical_grad(lambda: net.forward_backward(x, y).loss, layer.weight)
        errs[layer.name] = rel_error(bundle.grads[layer.name], fd)
    return errs


@pytest.mark.parametrize("seed", range(3))
def test_network_finite_differences(seed):
    r = np.random.default_rng(seed)
    net = toy_net(r)
    x = r.standard_normal((6, 4))
    y = r.integers(0, 3, 6)
    for name, err in network_fd_errors(net, x, y).items():
        assert err < 1e-5, (name, err)


def test_conv_network_finite_differences(rng):
    net = build([
        {"type": "conv", "out": 2, "kernel": 3, "padding": 1},
        {"type": "bn"}, {"type": "relu"}, {"type": "pool", "window": 2},
        {"type": "flatten"}, {"type": "fc", "out": 3},
    ], (2, 4, 4), 3, seed=3)
    x = rng.standard_normal((3, 2, 4, 4))
    y = np.array([0, 2, 1])
    for name, err in network_fd_errors(net, x, y).items():
        assert err < 1e-5, (name, err)


def test_duplicated_batch_same_gradient(rng):
    net = toy_net(rng)
    x = rng.standard_normal((5, 4))
    y = rng.integers(0, 3, 5)
    once = net.forward_backward(x, y)
    twice = net.forward_backward(np.concatenate([x, x]), np.concatenate([y, y]))
    assert twice.loss == pytest.approx(once.loss, rel=1e-14)
    for name, g in once.grads.items():
        assert np.allclose(twice.grads[name], g, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("classes", [2, 10, 100])
def test_zero_final_layer_gives_log_classes(classes, rng):
    net = build([{"type": "fc", "out": 6}, {"type": "relu"}, {"type": "fc", "out": classes}], (4,), classes)
    net.layers[-1].weight = np.zeros((classes, 6))
    bundle = net.forward_backward(rng.standard_normal((7, 4)) * 5, rng.integers(0, classes, 7))
    assert bundle.loss == pytest.approx(math.log(classes), rel=1e-14)


def test_manual_composition_is_identical(rng):
    net = toy_net(rng)
    x = rng.standard_normal((6, 4))
    y = rng.integers(0, 3, 6)
    bundle = net.forward_backward(x, y)
    # replay the same layers one call at a time
    h = x.T
    for layer in net.layers:
        h = layer.forward(h)
    loss = SoftmaxCrossEntropy()
    assert loss.forward(h, y) == bundle.loss
    g = loss.backward()
    manual = {}
    for layer in reversed(net.layers):
        g, gw = layer.backward(g)
        if gw is not None:
            manual[layer.name] = gw
    for name, gw in bundle.grads.items():
        assert np.array_equal(manual[name], gw)


def test_grads_in_network_order(rng):
    net = build("lenet-bn-mini", (3, 32, 32), 10)
    bundle = net.forward_backward(rng.standard_normal((2, 3, 32, 32)), [0, 1])
    assert list(bundle.grads) == ["cv1", "cv2", "fc1", "fc2", "fc3"]
    for layer in net.parametric_layers:
        assert bundle.grads[layer.name].shape == layer.weight.shape


def test_wrong_input_shape(rng):
    net = toy_net(rng)
    with pytest.raises(DimensionError, match="does not match"):
        net.forward_backward(rng.standard_normal((3, 5)), [0, 1, 2])


def test_evaluate_perfect_separation():
    net = Network([FullyConnected(3, 3, weight=np.eye(3) * 50, name="fc")], (3,), 3)
    x = np.eye(3)[[0, 1, 2, 2, 1]]
    acc, loss = evaluate(net, x, [0, 1, 2, 2, 1])
    assert acc == 1.0
    assert loss < 1e-20


def test_evaluate_untrained_chance(rng):
    net = build("lenet-bn-mini", (3, 32, 32), 10, seed=2)
    x = rng.standard_normal((1000, 3, 32, 32))
    y = rng.integers(0, 10, 1000)
    acc, _ = evaluate(net, x, y)
    assert abs(acc - 0.1) <= 0.03


def test_evaluate_deterministic(rng):
    net = toy_net(rng)
    net.forward_backward(rng.standard_normal((8, 4)), rng.integers(0, 3, 8))
    x = rng.standard_normal((50, 4))
    y = rng.integers(0, 3, 50)
    assert evaluate(net, x, y) == evaluate(net, x, y)


def test_evaluate_empty(rng):
    with pytest.raises(ValueError):
        evaluate(toy_net(rng), np.zeros((0, 4)), [])


def test_set_weights_roundtrip(rng):
    a, b = toy_net(rng), toy_net(rng)
    b.set_weights(a.weights())
    for name, w in a.weights().items():
        assert np.array_equal(b.layer(name).weight, w)


def test_build_is_seeded():
    a = build("lenet-bn-mini", (3, 32, 32), 10, seed=4).weights()
    b = build("lenet-bn-mini", (3, 32, 32), 10, seed=4).weights()
    c = build("lenet-bn-mini", (3, 32, 32), 10, seed=5).weights()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["cv1"], c["cv1"])


def test_conv_layer_types():
    net = build("vgg11-bn", (3, 32, 32), 10)
    convs = [layer for layer in net.layers if isinstance(layer, Conv2d)]
    assert len(convs) == 8
    assert all(c.weight.shape[2:] == (3, 3) and c.padding == 1 for c in convs)
