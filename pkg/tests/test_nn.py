import numpy as np
import pytest
from hypothesis import example, given, strategies as st

from headpose6d.errors import IoFailure, ShapeMismatch, StaleCache
from headpose6d.nn import (
    Adam, DenseNet, Layer, backward, finite_difference_check, flatten, forward, kink_signature,
    load_networks, save_networks, unflatten,
)


def test_zero_weights_give_bias():
    net = DenseNet([Layer(np.zeros((3, 4)), np.array([1.0, -2.0, 0.5]))])
    np.testing.assert_array_equal(forward(net, np.ones(4))[0], [1.0, -2.0, 0.5])


def test_identity_layer():
    net = DenseNet([Layer(np.eye(3), np.zeros(3))])
    x = np.array([0.3, -1.0, 2.0])
    np.testing.assert_array_equal(forward(net, x)[0], x)


def test_leaky_relu_slope():
    net = DenseNet([Layer(np.array([[2.0]]), np.array([1.0]), "leaky_relu"), Layer(np.eye(1), np.zeros(1))])
    y, cache = forward(net, np.array([-1.0]))
    assert cache["pres"][0][0] == -1.0
    assert y[0] == pytest.approx(-0.01, abs=1e-15)


def test_backward_examples(rng):
    net = DenseNet.create([4, 5, 2], rng)
    y, cache = forward(net, rng.normal(size=4))
    grads, dx = backward(net, cache, np.zeros(2))
    assert all(not g.any() for g in grads) and not dx.any()
    lin = DenseNet([Layer(np.array([[0.7]]), np.array([0.1]))])
    grads, _ = backward(lin, forward(lin, np.array([3.0]))[1], np.array([1.0]))
    assert grads[0][0, 0] == 3.0 and grads[1][0] == 1.0


def test_shape_errors(rng):
    net = DenseNet.create([4, 5, 2], rng)
    with pytest.raises(ShapeMismatch):
        forward(net, np.ones(3))
    other = DenseNet.create([4, 2], rng)
    with pytest.raises(StaleCache):
        backward(net, forward(other, np.ones(4))[1], np.ones(2))
    with pytest.raises(ShapeMismatch):
        DenseNet([Layer(np.ones((3, 4)), np.zeros(3)), Layer(np.ones((2, 5)), np.zeros(2))])


@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
@example(474, 1)  # tiny component, relative error within tol but above one ulp
def test_three_layer_gradient(seed, batch):
    rng = np.random.default_rng(seed)
    net = DenseNet.create([5, 6, 4, 3], rng)
    for p in net.params():
        p += rng.normal(size=p.shape) * 0.1
    x = rng.normal(size=(batch, 5))
    t = rng.normal(size=(batch, 3))
    like = net.params()

    def load(v):
        for p, a in zip(net.params(), unflatten(v, like)):
            p[...] = a

    def f(v):
        load(v)
        y, cache = forward(net, x)
        g, _ = backward(net, cache, y - t)
        return 0.5 * float(np.sum((y - t) ** 2)), flatten(g)

    def kinks(v):
        load(v)
        return kink_signature(net, forward(net, x)[1])

    v0 = flatten(like).copy()
    res = finite_difference_check(f, v0, 1e-4, kinks=kinks)
    assert res.passed(1e-5), res


def test_input_gradient(rng):
    net = DenseNet.create([4, 7, 2], rng)
    w = rng.normal(size=2)

    def f(x):
        y, cache = forward(net, x)
        return float(w @ y), backward(net, cache, w)[1]

    assert finite_difference_check(f, rng.normal(size=4), 1e-4, kinks=lambda x: kink_signature(net, forward(net, x)[1])).passed(1e-5)


def test_fd_check_quadratic_and_linear(rng):
    A = rng.normal(size=(5, 5))
    A = A @ A.T
    quad = lambda v: (0.5 * float(v @ A @ v), A @ v)
    assert finite_difference_check(quad, rng.normal(size=5), 1e-4).max_rel_error < 1e-9
    c = rng.normal(size=5)
    lin = lambda v: (float(c @ v), c)
    assert finite_difference_check(lin, rng.normal(size=5), 1e-4).max_rel_error < 1e-9


def test_fd_check_flags_kinks():
    # |x| straddled at 0: excluded, not failed
    f = lambda v: (float(np.abs(v).sum()), np.sign(v))
    res = finite_difference_check(f, np.array([1e-6, 1.0]), 1e-4, kinks=lambda v: v > 0)
    assert res.excluded == [0]
    assert res.passed(1e-5)


def test_fd_check_detects_wrong_gradient():
    f = lambda v: (float(v @ v), 2.02 * v)
    assert not finite_difference_check(f, np.array([1.0, 2.0]), 1e-4).passed(1e-5)


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, -2.0])]
    opt = Adam(lr=0.1)
    opt.step(p, [np.array([1.0, 1.0])])
    before = p[0].copy()
    m_before = opt.m[0].copy()
    opt.step(p, [np.zeros(2)])
    # momentum still moves the parameters; the moments only decay
    np.testing.assert_allclose(opt.m[0], 0.9 * m_before)
    q = [np.array([1.0, -2.0])]
    fresh = Adam(lr=0.1)
    fresh.step(q, [np.zeros(2)])
    np.testing.assert_array_equal(q[0], [1.0, -2.0])
    assert not np.array_equal(before, p[0])


@given(st.lists(st.floats(-100, 100).filter(lambda g: abs(g) > 1e-3), min_size=1, max_size=6))
def test_adam_first_step_is_lr_sign(gs):
    g = np.array(gs)
    p = [np.zeros_like(g)]
    Adam(lr=1e-3).step(p, [g])
    np.testing.assert_allclose(p[0], -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_decay():
    opt = Adam(lr=1e-3, decay_epoch=20)
    opt.set_epoch(19)
    assert opt.lr == 1e-3
    opt.set_epoch(20)
    assert opt.lr == pytest.approx(1e-4, rel=1e-15)


def test_checkpoint_round_trip(tmp_path, rng):
    nets = {"a": DenseNet.create([3, 4, 2], rng), "b": DenseNet.create([2, 5], rng)}
    save_networks(tmp_path / "m.npz", nets, {"note": "x"})
    back, meta = load_networks(tmp_path / "m.npz")
    assert meta["note"] == "x"
    for k in nets:
        for p, q in zip(nets[k].params(), back[k].params()):
            np.testing.assert_array_equal(p, q)
        assert back[k].layout() == nets[k].layout()


def test_checkpoint_rejects_foreign_file(tmp_path):
    np.savez(tmp_path / "x.npz", a=np.zeros(3))
    with pytest.raises(IoFailure):
        load_networks(tmp_path / "x.npz")
    with pytest.raises(IoFailure):
        load_networks(tmp_path / "missing.npz")
