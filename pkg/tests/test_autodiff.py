import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tscnet import autodiff as ad
from tscnet.autodiff import Tensor
from tscnet.gradcheck import check_gradients, numerical_gradient, relative_error

from oracles import loop_conv, loop_matmul


def fd_check(fn, *arrays, rtol=1e-4):
    """Check gradients of sum(fn(...) * probe) for every input array."""
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    probe = np.random.default_rng(99).normal(size=fn(*ts).shape)
    res = check_gradients(lambda: ad.sum(ad.mul(fn(*ts), probe)), [(str(i), t) for i, t in enumerate(ts)])
    for r in res:
        assert r.max_rel_error < rtol, r


# ---------------------------------------------------------------- forward oracles


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_matmul_matches_triple_loop(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
    np.testing.assert_allclose(ad.matmul(a, b).data, loop_matmul(a, b), rtol=1e-12, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(
    st.integers(1, 2),
    st.integers(1, 3),
    st.integers(1, 3),
    st.sampled_from([1, 3]),
    st.integers(1, 2),
    st.integers(0, 1),
    st.integers(3, 6),
    st.integers(0, 10_000),
)
def test_conv2d_matches_six_loop(n, c1, c2, k, stride, pad, size, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c1, size, size + 1))
    w = rng.normal(size=(c2, c1, k, k))
    np.testing.assert_allclose(ad.conv2d(x, w, stride, pad).data, loop_conv(x, w, stride, pad), atol=1e-12)


def test_conv2d_single_sample_and_geometry_errors():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    np.testing.assert_allclose(ad.conv2d(x, w, 1, 1).data, loop_conv(x[None], w, 1, 1)[0], atol=1e-12)
    with pytest.raises(ValueError):
        ad.conv2d(x, rng.normal(size=(3, 5, 3, 3)))
    with pytest.raises(ValueError):
        ad.conv2d(x, rng.normal(size=(3, 2, 7, 7)), 1, 1)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([(3, 1), (1, 4), (3, 4), (4,), ()]), st.integers(0, 10_000))
def test_broadcast_add_mul_match_loops(bshape, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=bshape)
    s, p = ad.add(a, b).data, ad.mul(a, b).data
    bb = np.broadcast_to(b, (3, 4))
    for i in range(3):
        for j in range(4):
            assert s[i, j] == a[i, j] + bb[i, j]
            assert p[i, j] == a[i, j] * bb[i, j]


def test_incompatible_shapes_raise():
    with pytest.raises(ValueError):
        ad.add(np.zeros((2, 3)), np.zeros((4,)))
    with pytest.raises(ValueError):
        ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_batchnorm_statistics_by_hand():
    rng = np.random.default_rng(1)
    x = rng.normal(2.0, 3.0, size=(5, 3, 2, 2))
    rm, rv = np.zeros(3), np.ones(3)
    gamma, beta = np.array([1.0, 2.0, 0.5]), np.array([0.0, -1.0, 3.0])
    out = ad.batchnorm(x, gamma, beta, rm, rv, training=True).data
    for c in range(3):
        vals = x[:, c].ravel()
        mu = vals.sum() / vals.size
        var = ((vals - mu) ** 2).sum() / vals.size
        np.testing.assert_allclose(out[:, c], gamma[c] * (x[:, c] - mu) / np.sqrt(var + 1e-5) + beta[c], atol=1e-12)
        unbiased = ((vals - mu) ** 2).sum() / (vals.size - 1)
        assert rm[c] == pytest.approx(0.1 * mu, rel=1e-12)
        assert rv[c] == pytest.approx(0.9 + 0.1 * unbiased, rel=1e-12)
    ev = ad.batchnorm(x, gamma, beta, rm, rv, training=False).data
    np.testing.assert_allclose(ev[:, 1], 2.0 * (x[:, 1] - rm[1]) / np.sqrt(rv[1] + 1e-5) - 1.0, atol=1e-12)


def test_batchnorm_frozen_stats_untouched():
    x = np.random.default_rng(2).normal(size=(4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    ad.batchnorm(x, np.ones(2), np.zeros(2), rm, rv, training=True, update_stats=False)
    assert (rm == 0).all() and (rv == 1).all()


def test_cross_entropy_by_hand():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
    labels = [1, 2]
    expect = 0.0
    for row, y in zip(logits, labels):
        expect += -np.log(np.exp(row[y]) / np.exp(row).sum())
    assert ad.cross_entropy(logits, labels).item() == pytest.approx(expect / 2, rel=1e-12)


def test_sigmoid_extremes_finite():
    s = ad.sigmoid(np.array([-800.0, 0.0, 800.0])).data
    assert 0.0 < s[0] < 1e-300 and s[1] == 0.5 and 1.0 - 1e-15 < s[2] < 1.0


def test_non_finite_raises():
    with np.errstate(over="ignore"), pytest.raises(ad.NonFiniteError):
        ad.mul(np.array([1e200]), np.array([1e200]))


# ---------------------------------------------------------------- gradients


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_elementwise_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
    fd_check(ad.add, a, b)
    fd_check(ad.sub, a, b)
    fd_check(ad.mul, a, b)
    fd_check(ad.sigmoid, a)
    fd_check(ad.tanh, a)
    # keep relu away from its kink
    fd_check(ad.relu, np.where(np.abs(a) < 0.05, 0.5, a))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_reduction_and_shape_gradients(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 3, 4))
    fd_check(lambda t: ad.sum(t, axis=1), a)
    fd_check(lambda t: ad.mean(t, axis=(0, 2)), a)
    fd_check(lambda t: ad.reshape(t, (6, 4)), a)
    fd_check(lambda t, u: ad.concat([t, u], axis=2), a, rng.normal(size=(2, 3, 2)))
    fd_check(ad.channel_mul, rng.normal(size=(2, 3, 2, 2)), rng.normal(size=3))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_matmul_gradients(seed):
    rng = np.random.default_rng(seed)
    fd_check(ad.matmul, rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))
    fd_check(ad.matmul, rng.normal(size=(3, 4)), rng.normal(size=4))
    fd_check(ad.matmul, rng.normal(size=4), rng.normal(size=(4, 2)))


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 3)])
def test_conv2d_gradients(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad + k)
    fd_check(lambda x, w: ad.conv2d(x, w, stride, pad), rng.normal(size=(2, 2, 5, 4)), rng.normal(size=(3, 2, k, k)))


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(training):
    rng = np.random.default_rng(3)
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)

    def f(x, g, b):
        return ad.batchnorm(x, g, b, rm, rv, training=training, update_stats=False)

    fd_check(f, rng.normal(size=(4, 3, 2, 2)), rng.normal(size=3), rng.normal(size=3))


def test_cross_entropy_gradient():
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 5, size=6)
    fd_check(lambda z: ad.cross_entropy(z, labels), rng.normal(size=(6, 5)))


def test_shared_node_gradient_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = ad.mul(x, x)
    loss = ad.sum(ad.add(y, ad.mul(y, 3.0)))
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, 8.0 * x.data)


def test_leaf_grads_accumulate_and_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    ad.backward(ad.sum(x))
    ad.backward(ad.sum(x))
    np.testing.assert_array_equal(x.grad, 2.0)
    x.zero_grad()
    assert x.grad is None or not x.grad.any()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 2.0)
        assert not ad.is_recording()
    assert not y.requires_grad
    assert ad.is_recording()


def test_backward_requires_scalar():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(ad.mul(x, 2.0))


def test_relative_error_floor_and_numerical_gradient():
    assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
    t = Tensor(np.array([0.3, -1.2]))
    g = numerical_gradient(lambda: float((t.data**3).sum()), t)
    np.testing.assert_allclose(g, 3 * t.data**2, rtol=1e-8)
