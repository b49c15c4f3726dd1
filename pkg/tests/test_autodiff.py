import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gpfl import autodiff as ad
from conftest import check_grads


def t(x):
    return ad.tensor(np.asarray(x, dtype=float))


def backward(build, **arrs):
    ps = {k: ad.param(np.asarray(v, dtype=float)) for k, v in arrs.items()}
    with ad.Graph() as g:
        loss = build(**ps)
    g.backward(loss)
    return {k: p.grad_or_zeros() for k, p in ps.items()}


# --- forward examples -------------------------------------------------------

def test_matmul_examples():
    np.testing.assert_array_equal(ad.matmul(t([[1, 0], [0, 1]]), t([[3], [4]])).data, [[3], [4]])
    np.testing.assert_array_equal(ad.matmul(t([[1, 2]]), t([[3], [4]])).data, [[11]])


def test_matmul_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        ad.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))


def test_elementwise_examples():
    np.testing.assert_array_equal(ad.elementwise("relu", t([-1, 0, 2])).data, [0, 0, 2])
    np.testing.assert_array_equal(ad.elementwise("hadamard", t([1, 2, 3]), t([4, 5, 6])).data, [4, 10, 18])
    g = backward(lambda x: ad.sum_all(ad.relu(x)), x=[-1.0, 2.0])
    np.testing.assert_array_equal(g["x"], [0, 1])


def test_elementwise_errors():
    with pytest.raises(ad.DimensionError):
        ad.add(t([1, 2]), t([1, 2, 3]))
    with pytest.raises(ValueError):
        ad.elementwise("pow", t([1.0]))


def test_layer_norm_examples():
    ones, zeros = t(np.ones(3)), t(np.zeros(3))
    np.testing.assert_allclose(ad.layer_norm(t([1, 1, 1]), ones, zeros, 1e-5).data, 0.0, atol=1e-12)
    out = ad.layer_norm(t([1, -1]), t(np.ones(2)), t(np.zeros(2)), 0.0).data
    np.testing.assert_allclose(out, [1, -1], rtol=0, atol=1e-15)
    # zero variance with eps 0 is defined as zeros before the affine part
    np.testing.assert_array_equal(ad.layer_norm(t([2, 2]), t([3, 3]), t([0.5, -1]), 0.0).data, [0.5, -1])


def test_layer_norm_errors():
    with pytest.raises(ad.EmptyInputError):
        ad.layer_norm(t(np.zeros(0)), t(np.zeros(0)), t(np.zeros(0)))
    with pytest.raises(ad.DimensionError):
        ad.layer_norm(t(np.ones(3)), t(np.ones(2)), t(np.zeros(3)))


def test_cosine_examples():
    assert ad.cosine_sim(t([1, 0]), t([1, 0])).item() == 1.0
    assert ad.cosine_sim(t([1, 0]), t([0, 1])).item() == 0.0
    assert ad.cosine_sim(t([3, 0]), t([1, 0])).item() == 1.0
    with pytest.raises(ad.DegenerateVectorError):
        ad.cosine_sim(t([0, 0]), t([1, 0]))
    with pytest.raises(ad.DimensionError):
        ad.cosine_sim(t([1, 0]), t([1, 0, 0]))


def test_cosine_matrix_clamps_when_not_strict():
    out = ad.cosine_matrix(t([[0.0, 0.0]]), t([[1.0, 0.0]]))
    assert np.all(np.isfinite(out.data)) and out.data[0, 0] == 0.0


def test_softmax_xent_examples():
    assert math.isclose(ad.softmax_cross_entropy(t([0, 0]), 0).item(), math.log(2), rel_tol=0, abs_tol=1e-15)
    v = ad.softmax_cross_entropy(t([1e3, 0]), 0).item()
    assert math.isfinite(v) and 0 <= v < 1e-12
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(t([0, 0]), 2)


def test_softmax_xent_gradient_is_softmax_minus_onehot(rng):
    for _ in range(20):
        z = rng.normal(size=5) * 3
        y = int(rng.integers(5))
        g = backward(lambda z: ad.softmax_cross_entropy(z, y), z=z)["z"]
        p = np.exp(z - z.max())
        p /= p.sum()
        p[y] -= 1.0
        np.testing.assert_allclose(g, p, rtol=0, atol=1e-14)


def test_l2_examples(rng):
    assert ad.l2_distance(t([0, 0]), t([3, 4])).item() == 5.0
    assert ad.l2_distance(t([1, 2]), t([1, 2])).item() == 0.0
    g = backward(lambda a, b: ad.l2_distance(a, b), a=[1.0, 2.0], b=[1.0, 2.0])
    np.testing.assert_array_equal(g["a"], 0.0)


# --- gradient oracles -------------------------------------------------------

def test_matmul_gradient_fd(rng):
    for s in range(10):
        r = np.random.default_rng(s)
        a, b = r.normal(size=(3, 4)), r.normal(size=(4, 2))
        err = check_grads(lambda p: ad.sum_all(ad.matmul(p["a"], p["b"])), {"a": a, "b": b})
        assert err < 1e-6


def test_layer_norm_gradient_fd():
    for s in range(10):
        r = np.random.default_rng(s)
        arrs = {"x": r.normal(size=8), "g": r.normal(size=8), "b": r.normal(size=8)}
        w = r.normal(size=8)
        err = check_grads(lambda p: ad.sum_all(ad.hadamard(ad.layer_norm(p["x"], p["g"], p["b"]), ad.tensor(w))),
                          arrs)
        assert err < 1e-5


def test_l2_gradient_fd():
    done = 0
    for s in range(50):
        r = np.random.default_rng(s)
        a, b = r.normal(size=6), r.normal(size=6)
        if np.linalg.norm(a - b) <= 0.1:
            continue
        assert check_grads(lambda p: ad.l2_distance(p["a"], p["b"]), {"a": a, "b": b}) < 1e-6
        done += 1
    assert done >= 40


@pytest.mark.parametrize("name", ["film", "cosine", "xent_batch", "row_l2", "mse", "global_norm", "gather",
                                  "take_row", "linear", "weighted"])
def test_primitive_gradients_fd(name):
    for s in range(5):
        r = np.random.default_rng(100 + s)
        w = r.normal(size=(3, 4))
        if name == "film":
            arrs = {"f": r.normal(size=(3, 4)), "g": r.normal(size=4), "b": r.normal(size=4)}
            fn = lambda p: ad.sum_all(ad.hadamard(ad.film(p["f"], p["g"], p["b"]), ad.tensor(w)))
        elif name == "cosine":
            arrs = {"f": r.normal(size=(3, 4)), "c": r.normal(size=(5, 4))}
            w5 = r.normal(size=(3, 5))
            fn = lambda p: ad.sum_all(ad.hadamard(ad.cosine_matrix(p["f"], p["c"]), ad.tensor(w5)))
        elif name == "xent_batch":
            arrs = {"z": r.normal(size=(3, 4))}
            y = r.integers(0, 4, size=3)
            fn = lambda p: ad.softmax_cross_entropy(p["z"], y)
        elif name == "row_l2":
            arrs = {"a": r.normal(size=(3, 4)), "b": r.normal(size=(3, 4))}
            fn = lambda p: ad.mean(ad.row_l2_distance(p["a"], p["b"]))
        elif name == "mse":
            arrs = {"a": r.normal(size=(3, 4)), "b": r.normal(size=(3, 4))}
            fn = lambda p: ad.mse(p["a"], p["b"])
        elif name == "global_norm":
            arrs = {"a": r.normal(size=(3, 4)), "b": r.normal(size=2)}
            fn = lambda p: ad.global_norm([p["a"], p["b"]])
        elif name == "gather":
            arrs = {"t": r.normal(size=(5, 4))}
            idx = np.array([0, 3, 3])
            fn = lambda p: ad.sum_all(ad.hadamard(ad.gather_rows(p["t"], idx), ad.tensor(w)))
        elif name == "take_row":
            arrs = {"t": r.normal(size=(3, 4))}
            fn = lambda p: ad.sum_all(ad.hadamard(ad.take_row(p["t"], 1), ad.tensor(w[0])))
        elif name == "linear":
            arrs = {"x": r.normal(size=(3, 4)), "W": r.normal(size=(2, 4)), "b": r.normal(size=2)}
            fn = lambda p: ad.sum_all(ad.relu(ad.linear(p["x"], p["W"], p["b"])))
        else:
            arrs = {"a": r.normal(size=3)}
            fn = lambda p: ad.weighted_sum([(0.5, ad.sum_all(p["a"])), (2.0, ad.l2_distance(p["a"], ad.tensor(w[0, :3])))])
        assert check_grads(fn, arrs) < 1e-5, name


# --- tape semantics ---------------------------------------------------------

def test_no_graph_means_no_recording():
    p = ad.param([1.0, 2.0])
    out = ad.scale(p, 3.0)
    assert not out.requires_grad


def test_frozen_never_accumulates():
    c = ad.DiffTensor(np.ones(3), requires_grad=True, frozen=True)
    x = ad.param(np.ones(3))
    with ad.Graph() as g:
        loss = ad.sum_all(ad.hadamard(c, x))
    g.backward(loss)
    np.testing.assert_array_equal(c.grad, 0.0)
    np.testing.assert_array_equal(x.grad, 1.0)


def test_fan_out_accumulates():
    x = ad.param([2.0])
    with ad.Graph() as g:
        loss = ad.sum_all(ad.add(ad.hadamard(x, x), x))
    g.backward(loss)
    np.testing.assert_allclose(x.grad, [5.0])


def test_backward_needs_scalar():
    x = ad.param([1.0, 2.0])
    with ad.Graph() as g:
        y = ad.scale(x, 2.0)
    with pytest.raises(ad.DimensionError):
        g.backward(y)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-10, 10)),
       arrays(np.float64, 6, elements=st.floats(-10, 10)))
def test_cosine_bounded_and_scale_invariant(a, b):
    b = b[:a.size]
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    s = ad.cosine_sim(t(a), t(b)).item()
    assert -1 - 1e-12 <= s <= 1 + 1e-12
    assert math.isclose(ad.cosine_sim(t(7.5 * a), t(b)).item(), s, rel_tol=1e-9, abs_tol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.data())
def test_xent_nonnegative_and_shift_invariant(z, data):
    y = data.draw(st.integers(0, z.size - 1))
    v = ad.softmax_cross_entropy(t(z), y).item()
    assert v >= 0.0
    assert math.isclose(ad.softmax_cross_entropy(t(z + 3.0), y).item(), v, rel_tol=1e-9, abs_tol=1e-9)
