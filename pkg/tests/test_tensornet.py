import numpy as np
import pytest

from posekit.exceptions import ConfigurationError, DataError, StateError
from posekit.nn import (
    Adam,
    Conv2d,
    Linear,
    MaxPool2d,
    Network,
    ReLU,
    Sigmoid,
    Upsample2x,
    apply_layer,
    assign_parameters,
    bilinear_warp,
    bilinear_warp_backward,
    check_function,
    cosine_lr,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    spatial_softmax,
    spatial_softmax_backward,
    upsample_bilinear,
    upsample_bilinear_backward,
    zero_parameters,
)


def l2(y):
    return 0.5 * float((y ** 2).sum()), y


def weighted(seed, shape):
    w = np.random.default_rng(seed).normal(size=shape)

    def loss(y):
        return float((w * y).sum()), w
    return loss


def randomize_biases(net, seed=0):
    # keeps pre-activations away from the relu kink at exactly zero
    rng = np.random.default_rng(seed)
    for name, p in net.parameters().items():
        if name.endswith("bias"):
            p.data[...] = rng.normal(scale=0.1, size=p.shape)


def test_conv_identity_kernel():
    conv = Conv2d(3, 3, k=1, pad=0)
    conv.params["weight"].data[...] = np.eye(3)[:, :, None, None]
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 4))
    assert np.array_equal(apply_layer(conv, x), x)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    conv = Conv2d(2, 3, k=3, stride=2, pad=1, rng=rng)
    conv.params["bias"].data[...] = rng.normal(size=3)
    x = rng.normal(size=(1, 2, 7, 6))
    y = conv.forward(x)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    W, b = conv.params["weight"].data, conv.params["bias"].data
    ref = np.zeros((1, 3, 4, 3))
    for o in range(3):
        for i in range(4):
            for j in range(3):
                ref[0, o, i, j] = (xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * W[o]).sum() + b[o]
    assert np.allclose(y, ref, atol=1e-12)


def test_maxpool_relu_sigmoid_examples():
    assert np.array_equal(MaxPool2d(2).forward(np.array([[[[1.0, 2], [3, 4]]]])), [[[[4.0]]]])
    assert np.array_equal(ReLU().forward(np.array([-1.0, 0, 2])), [0, 0, 2])
    assert Sigmoid().forward(np.zeros(1))[0] == 0.5
    assert np.isfinite(Sigmoid().forward(np.array([-800.0, 800.0]))).all()


def test_upsample_nearest():
    x = np.array([[[[1.0, 2], [3, 4]]]])
    y = Upsample2x().forward(x)
    assert y.shape == (1, 1, 4, 4) and np.array_equal(y[0, 0, :2, :2], np.ones((2, 2)))


def test_network_validates_shapes():
    with pytest.raises(ConfigurationError):
        Network([Conv2d(3, 4), Linear(10, 2)], (3, 8, 8))
    with pytest.raises(ConfigurationError):
        Network([MaxPool2d(2)], (1, 5, 5))
    net = Network([Conv2d(1, 2)], (1, 4, 4))
    assert net.output_shape == (2, 4, 4)
    with pytest.raises(ConfigurationError):
        net.forward(np.zeros((1, 2, 4, 4)))


def test_backward_without_forward():
    net = Network([Linear(2, 2)], (2,))
    with pytest.raises(StateError):
        net.backward(np.zeros((1, 2)))


def test_zero_upstream_gives_zero_gradients():
    net = Network([Conv2d(1, 2), ReLU(), Linear(32, 3)], (1, 4, 4))
    net.forward(np.random.default_rng(0).normal(size=(2, 1, 4, 4)))
    net.backward(np.zeros((2, 3)))
    assert all((p.grad == 0).all() for p in net.parameters().values())


def test_linear_gradient_hand_computed():
    lin = Linear(2, 2)
    lin.params["weight"].data[...] = [[1.0, 2.0], [3.0, 4.0]]
    net = Network([lin], (2,))
    x = np.array([[1.0, -1.0]])
    y = net.forward(x)
    assert np.allclose(y, [[-1.0, -1.0]])
    delta = y                               # from 0.5 * |y|^2
    net.backward(delta)
    assert np.allclose(lin.params["weight"].grad, [[-1.0, 1.0], [-1.0, 1.0]])
    assert np.allclose(lin.params["bias"].grad, [-1.0, -1.0])


def test_grad_check_linear():
    net = Network([Linear(5, 3, rng=np.random.default_rng(2))], (5,))
    x = np.random.default_rng(3).normal(size=(4, 5))
    assert grad_check(net, x, l2) < 1e-6


def test_grad_check_conv_relu_pool():
    rng = np.random.default_rng(4)
    net = Network([Conv2d(2, 3, rng=rng), ReLU(), MaxPool2d(2), Conv2d(3, 2, k=2, stride=2, pad=0, rng=rng),
                   Upsample2x(), Sigmoid(), Linear(2 * 4 * 4, 3, rng=rng)], (2, 8, 8))
    randomize_biases(net)
    x = rng.normal(size=(2, 2, 8, 8))
    assert grad_check(net, x, weighted(5, (2, 3))) < 1e-4


def test_grad_check_zero_weights():
    net = Network([Linear(3, 4), ReLU(), Linear(4, 2)], (3,))
    zero_parameters(net)
    x = np.random.default_rng(0).normal(size=(2, 3))
    net.forward(x)
    net.backward(np.ones((2, 2)))
    first = net.parameters()["net.0.fully_connected.weight"]
    assert (first.grad == 0).all()


def test_warp_zero_flow_is_identity():
    F = np.random.default_rng(0).normal(size=(2, 3, 5, 6))
    out, _ = bilinear_warp(F, np.zeros((2, 2, 5, 6)))
    assert np.array_equal(out, F)


def test_warp_integer_shift():
    F = np.random.default_rng(1).normal(size=(1, 2, 4, 5))
    flow = np.zeros((1, 2, 4, 5))
    flow[:, 0] = 1
    out, _ = bilinear_warp(F, flow)
    assert np.array_equal(out[..., :-1], F[..., 1:])
    assert (out[..., -1] == 0).all()


def test_warp_half_pixel_averages_neighbours():
    F = np.array([[[[0.0, 2.0]]]])
    flow = np.zeros((1, 2, 1, 2))
    flow[:, 0] = 0.5
    out, _ = bilinear_warp(F, flow)
    assert out[0, 0, 0, 0] == pytest.approx(1.0)


def test_warp_gradients():
    rng = np.random.default_rng(2)
    F = rng.normal(size=(1, 2, 5, 5))
    flow = rng.uniform(-1.7, 1.7, size=(1, 2, 5, 5))
    w = rng.normal(size=F.shape)

    def f(F, flow):
        out, cache = bilinear_warp(F, flow)
        dF, dflow = bilinear_warp_backward(cache, w)
        return float((w * out).sum()), (dF, dflow)
    assert check_function(f, [F, flow], eps=1e-6) < 1e-5


def test_spatial_softmax():
    a, _ = spatial_softmax(np.zeros((1, 2, 3, 4)))
    assert np.allclose(a, 1 / 12)
    s = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    a, _ = spatial_softmax(s)
    assert np.allclose(a.sum(axis=(2, 3)), 1.0)
    s[0, 0, 1, 2] += 25
    a, _ = spatial_softmax(s)
    assert a[0, 0, 1, 2] > 1 - 1e-8
    w = np.random.default_rng(1).normal(size=(1, 2, 3, 3))

    def f(s):
        a, cache = spatial_softmax(s)
        return float((w * a).sum()), (spatial_softmax_backward(cache, w),)
    assert check_function(f, [np.random.default_rng(2).normal(size=(1, 2, 3, 3))]) < 1e-6


def test_bilinear_upsample():
    x = np.random.default_rng(0).normal(size=(1, 2, 3, 4))
    y, cache = upsample_bilinear(x, (3, 4))
    assert np.allclose(y, x)
    y, cache = upsample_bilinear(np.ones((1, 1, 2, 2)), (8, 8))
    assert np.allclose(y, 1.0)
    w = np.random.default_rng(1).normal(size=(1, 2, 7, 9))

    def f(x):
        y, cache = upsample_bilinear(x, (7, 9))
        return float((w * y).sum()), (upsample_bilinear_backward(cache, w),)
    assert check_function(f, [x]) < 1e-6


def test_adam_minimises_quadratic():
    net = Network([Linear(3, 1, rng=np.random.default_rng(0))], (3,))
    opt = Adam(net.parameters(), lr=0.05)
    x = np.random.default_rng(1).normal(size=(16, 3))
    y = x @ [1.0, -2.0, 0.5] + 0.3
    for _ in range(600):
        opt.zero_grad()
        pred = net.forward(x)[:, 0]
        net.backward(((pred - y) / len(y))[:, None])
        opt.step()
    assert np.allclose(net.parameters()["net.0.fully_connected.weight"].data, [[1, -2, 0.5]], atol=1e-3)


def test_adam_skips_frozen():
    net = Network([Linear(2, 1)], (2,))
    params = net.parameters()
    before = {k: p.data.copy() for k, p in params.items()}
    for p in params.values():
        p.grad[...] = 1.0
    Adam(params).step(frozen=set(params))
    assert all(np.array_equal(before[k], p.data) for k, p in params.items())


def test_cosine_schedule():
    assert cosine_lr(1e-3, 0, 100) == pytest.approx(1e-3)
    assert cosine_lr(1e-3, 99, 100) == pytest.approx(2e-5)
    values = [cosine_lr(1.0, s, 50) for s in range(50)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_checkpoint_round_trip(tmp_path):
    net = Network([Conv2d(1, 2, rng=np.random.default_rng(3)), ReLU(), Linear(2 * 9, 2)], (1, 3, 3))
    path = tmp_path / "w.pknn"
    save_checkpoint(path, net.parameters(), {"note": "x"})
    arrays, meta = load_checkpoint(path)
    assert meta == {"note": "x"}
    other = Network([Conv2d(1, 2, rng=np.random.default_rng(9)), ReLU(), Linear(2 * 9, 2)], (1, 3, 3))
    assign_parameters(other.parameters(), arrays)
    x = np.random.default_rng(0).normal(size=(1, 1, 3, 3))
    assert np.array_equal(other.forward(x), net.forward(x))


def test_checkpoint_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(b"nope")
    with pytest.raises(DataError):
        load_checkpoint(bad)
    good = tmp_path / "good"
    save_checkpoint(good, {"a": np.ones((3, 3))})
    (tmp_path / "cut").write_bytes(good.read_bytes()[:-20])
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "cut")
    with pytest.raises(DataError):
        assign_parameters(Network([Linear(2, 2)], (2,)).parameters(), {"x": np.ones(1)})
