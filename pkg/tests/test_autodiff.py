import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from uqal import autodiff as ad
from uqal.autodiff import Graph, RngStream


def _fd_grad(f, x, h=1e-5):
    """Central differences of a numpy -> float function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = out.reshape(-1)
    for i in range(x.size):
        xp, xm = x.copy().reshape(-1), x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return out


def _rel(a, b):
    return float(np.max(np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-12)))


# ---------------------------------------------------------------------------
# elementwise


def test_relu_values():
    assert ad.relu([-1.0, 0.0, 2.0]).data.tolist() == [0.0, 0.0, 2.0]


def test_add_values():
    assert ad.add([1.0, 2.0], [3.0, 4.0]).data.tolist() == [4.0, 6.0]


def test_log_gradient_at_two():
    g = Graph()
    a = g.variable([2.0])
    d = ad.grad(ad.reduce("sum", ad.log(a)), a)
    central = (math.log(2 + 1e-5) - math.log(2 - 1e-5)) / 2e-5
    assert d[0] == pytest.approx(0.5, abs=1e-12)
    assert abs(d[0] - central) < 1e-9


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError):
        ad.log([1.0, 0.0])


def test_shape_mismatch_rejected():
    with pytest.raises(ad.ShapeError):
        ad.add([1.0, 2.0], [1.0, 2.0, 3.0])


def test_scalar_broadcast():
    assert ad.mul([1.0, 2.0], 3.0).data.tolist() == [3.0, 6.0]


def test_relu_subgradient_zero_at_zero():
    g = Graph()
    a = g.variable([-1.0, 0.0, 2.0])
    assert ad.grad(ad.reduce("sum", ad.relu(a)), a).tolist() == [0.0, 0.0, 1.0]


def test_clamp_gradient_inside_only():
    g = Graph()
    a = g.variable([-2.0, 0.5, 3.0])
    d = ad.grad(ad.reduce("sum", ad.clamp(a, 0.0, 1.0)), a)
    assert d.tolist() == [0.0, 1.0, 0.0]


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "neg", "exp", "log", "relu", "clamp"])
def test_elementwise_gradients_match_fd(kind, rng):
    a0 = rng.uniform(0.2, 2.0, 7) * rng.choice([-1, 1], 7) if kind in ("relu", "clamp") else rng.uniform(0.2, 2.0, 7)
    b0 = rng.uniform(0.2, 2.0, 7)
    kw = {"lo": -0.5, "hi": 0.9} if kind == "clamp" else {}
    binary = kind in ("add", "sub", "mul")

    def f(t):
        out = ad.elementwise(kind, t, ad.constant(b0) if binary else None, **kw)
        return ad.reduce("sum", ad.mul(out, out))

    assert ad.finite_diff_check(f, a0, h=1e-6) < 1e-6


def test_nonfinite_is_an_error():
    with pytest.raises(ad.NonFiniteError):
        ad.exp([1000.0])


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(np.eye(2), m).data, m)


def test_matmul_hand_product():
    assert ad.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]


def test_matmul_dimension_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradients(rng):
    a0, b0 = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    g = Graph()
    a, b = g.variable(a0), g.variable(b0)
    grads = ad.backward(g, ad.reduce("sum", ad.matmul(a, b)))
    fa = _fd_grad(lambda v: float(np.sum(v @ b0)), a0)
    fb = _fd_grad(lambda v: float(np.sum(a0 @ v)), b0)
    assert _rel(grads[a.node_id], fa) < 1e-6
    assert _rel(grads[b.node_id], fb) < 1e-6


# ---------------------------------------------------------------------------
# conv2d


def _conv_loop(x, k, stride, pad):
    C, H, W = x.shape
    F, _, kh, kw = k.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    Ho, Wo = (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1
    out = np.zeros((F, Ho, Wo))
    for f in range(F):
        for i in range(Ho):
            for j in range(Wo):
                s = 0.0
                for c in range(C):
                    for u in range(kh):
                        for v in range(kw):
                            s += xp[c, i * stride + u, j * stride + v] * k[f, c, u, v]
                out[f, i, j] = s
    return out


def _conv_loop_grads(x, k, stride, pad, g):
    C, H, W = x.shape
    F, _, kh, kw = k.shape
    gx = np.zeros((C, H + 2 * pad, W + 2 * pad))
    gk = np.zeros_like(k)
    xp = np.zeros_like(gx)
    xp[:, pad:pad + H, pad:pad + W] = x
    for f in range(F):
        for i in range(g.shape[1]):
            for j in range(g.shape[2]):
                for c in range(C):
                    for u in range(kh):
                        for v in range(kw):
                            gx[c, i * stride + u, j * stride + v] += g[f, i, j] * k[f, c, u, v]
                            gk[f, c, u, v] += g[f, i, j] * xp[c, i * stride + u, j * stride + v]
    return gx[:, pad:pad + H, pad:pad + W], gk


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(1, 5, 5))
    out = ad.conv2d(x, np.ones((1, 1, 1, 1)), 1, 0)
    assert np.array_equal(out.data, x)


def test_conv_all_ones():
    assert ad.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), 1, 0).data.tolist() == [[[9.0]]]


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loop_oracle(stride, pad, rng):
    x0, k0 = rng.normal(size=(2, 8, 8)), rng.normal(size=(3, 2, 3, 3))
    g = Graph()
    x, k = g.variable(x0), g.variable(k0)
    out = ad.conv2d(x, k, stride, pad)
    ref = _conv_loop(x0, k0, stride, pad)
    assert out.shape == ref.shape
    assert np.max(np.abs(out.data - ref)) < 1e-10
    w = rng.normal(size=ref.shape)
    grads = ad.backward(g, ad.reduce("sum", ad.mul(out, ad.constant(w))))
    gx, gk = _conv_loop_grads(x0, k0, stride, pad, w)
    assert np.max(np.abs(grads[x.node_id] - gx)) < 1e-10
    assert np.max(np.abs(grads[k.node_id] - gk)) < 1e-10


def test_conv_kernel_too_large():
    with pytest.raises(ad.ShapeError):
        ad.conv2d(np.ones((1, 2, 2)), np.ones((1, 1, 3, 3)), 1, 0)


def test_conv_batched_equals_per_sample(rng):
    x0, k0 = rng.normal(size=(3, 2, 6, 6)), rng.normal(size=(4, 2, 3, 3))
    batched = ad.conv2d(x0, k0, 2, 1).data
    for i in range(3):
        assert np.array_equal(batched[i], ad.conv2d(x0[i], k0, 2, 1).data)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_symmetric():
    assert ad.softmax([0.0, 0.0]).data.tolist() == [0.5, 0.5]


def test_softmax_no_overflow():
    p = ad.softmax([1000.0, 0.0]).data
    assert p[0] == 1.0 and 0.0 <= p[1] < 1e-300


def test_softmax_jacobian(rng):
    z0 = rng.normal(size=5)
    w = rng.normal(size=5)
    f = lambda t: ad.reduce("sum", ad.mul(ad.softmax(t), ad.constant(w)))
    assert ad.finite_diff_check(f, z0, h=1e-5) < 1e-6


def test_softmax_needs_two_classes():
    with pytest.raises(ad.ShapeError):
        ad.softmax([1.0])


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, min_side=2, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(z):
    p = ad.softmax(z).data
    assert np.all(p >= 0) and np.all(p <= 1)
    assert np.all(np.abs(p.sum(axis=-1) - 1.0) < 1e-9)


# ---------------------------------------------------------------------------
# dropout and streams


def test_dropout_rate_zero_is_identity(rng):
    x = rng.normal(size=(4, 3))
    out = ad.dropout_apply(x, 0.0, RngStream(1))
    assert np.array_equal(out.data, x)


def test_dropout_same_mask_after_reset():
    s = RngStream(5, 9)
    a = ad.dropout_apply(np.ones(50), 0.5, s).data
    s.reset()
    b = ad.dropout_apply(np.ones(50), 0.5, s).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, ad.dropout_apply(np.ones(50), 0.5, s).data)


def test_dropout_unbiased():
    out = ad.dropout_apply(np.ones(100_000), 0.3, RngStream(0)).data
    assert abs(out.mean() - 1.0) < 0.01


def test_dropout_backward_uses_mask():
    g = Graph()
    a = g.variable(np.ones(20))
    out = ad.dropout_apply(a, 0.5, RngStream(3))
    assert np.array_equal(ad.grad(ad.reduce("sum", out), a), out.data)


def test_dropout_rate_one_rejected():
    with pytest.raises(ValueError):
        ad.dropout_apply(np.ones(3), 1.0, RngStream(0))


def test_streams_reproducible_and_distinct():
    a = RngStream.derive(7, "eval", 3).random(5)
    assert np.array_equal(a, RngStream.derive(7, "eval", 3).random(5))
    assert not np.array_equal(a, RngStream.derive(7, "eval", 4).random(5))
    assert not np.array_equal(a, RngStream.derive(7, "attack", 3).random(5))


def test_stream_clone_continues_identically():
    s = RngStream(1, 2)
    s.random(3)
    c = s.clone()
    assert np.array_equal(s.random(4), c.random(4))


def test_graph_replay_bit_identical(rng):
    x0, w0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 6))

    def run():
        g = Graph()
        x = g.variable(x0)
        h = ad.dropout_apply(ad.relu(ad.matmul(x, ad.constant(w0))), 0.3, RngStream(11))
        loss = ad.reduce("sum", ad.mul(h, h))
        return loss.data, ad.grad(loss, x)

    (l1, g1), (l2, g2) = run(), run()
    assert np.array_equal(l1, l2) and np.array_equal(g1, g2)


# ---------------------------------------------------------------------------
# reductions


def test_sum():
    assert ad.reduce("sum", [1.0, 2.0, 3.0]).item() == 6.0


def test_mean_axis0():
    assert ad.reduce("mean", [[1.0, 3.0], [3.0, 5.0]], axis=0).data.tolist() == [2.0, 4.0]


def test_mean_gradient(rng):
    x0 = rng.normal(size=(3, 4))
    f = lambda t: ad.reduce("sum", ad.mul(ad.reduce("mean", t, axis=1), ad.constant([1.0, -2.0, 0.5])))
    assert ad.finite_diff_check(f, x0) < 1e-6


def test_max_routes_to_first_maximum():
    g = Graph()
    a = g.variable([1.0, 3.0, 3.0, 2.0])
    assert ad.grad(ad.reduce("max", a), a).tolist() == [0.0, 1.0, 0.0, 0.0]


def test_invalid_axis():
    with pytest.raises(ad.ShapeError):
        ad.reduce("sum", np.ones((2, 2)), axis=2)


# ---------------------------------------------------------------------------
# backward


def test_backward_identity():
    g = Graph()
    x = g.variable([4.0])
    assert ad.grad(ad.reshape(x, ()), x).tolist() == [1.0]


def test_backward_sum_of_squares():
    g = Graph()
    x = g.variable([1.0, 2.0])
    assert ad.grad(ad.reduce("sum", ad.mul(x, x)), x).tolist() == [2.0, 4.0]


def test_backward_needs_scalar():
    g = Graph()
    x = g.variable([1.0, 2.0])
    with pytest.raises(ad.ShapeError):
        ad.backward(g, ad.mul(x, x))


def test_backward_unreachable_zero_and_rerunnable():
    g = Graph()
    x, y = g.variable([1.0, 2.0]), g.variable([5.0])
    loss = ad.reduce("sum", ad.mul(x, x))
    first = ad.backward(g, loss)
    assert first[y.node_id].tolist() == [0.0]
    n = len(g)
    second = ad.backward(g, loss)
    assert len(g) == n
    assert np.array_equal(first[x.node_id], second[x.node_id])


def test_graph_parents_precede_children(rng):
    g = Graph()
    x = g.variable(rng.normal(size=(2, 3)))
    ad.reduce("sum", ad.softmax(ad.matmul(x, ad.constant(rng.normal(size=(3, 4))))))
    for nid, node in enumerate(g.nodes):
        assert all(p < nid for p in node.parents)


def test_random_two_layer_nets_input_gradient():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        w1, b1 = rng.normal(size=(6, 8)), rng.normal(size=8)
        w2 = rng.normal(size=(8, 3))
        y = int(rng.integers(3))

        def f(t):
            h = ad.relu(ad.bias_add(ad.matmul(ad.reshape(t, (1, 6)), ad.constant(w1)), ad.constant(b1)))
            return ad.neg(ad.reduce("sum", ad.take(ad.log_softmax(ad.matmul(h, ad.constant(w2))), np.array([y]))))

        worst = max(worst, ad.finite_diff_check(f, rng.normal(size=6), h=1e-4))
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# finite_diff_check itself


def test_fd_check_linear(rng):
    assert ad.finite_diff_check(lambda t: ad.reduce("sum", t), rng.normal(size=5)) < 1e-10


def test_fd_check_quadratic_exact():
    for h in (1e-1, 1e-3, 0.5):
        assert ad.finite_diff_check(lambda t: ad.reduce("sum", ad.mul(t, t)), [3.0], h=h) < 1e-12


def test_fd_check_softmax_cross_entropy(rng):
    z = rng.normal(size=6)
    f = lambda t: ad.neg(ad.reduce("sum", ad.take(ad.log_softmax(t), np.array(2))))
    assert ad.finite_diff_check(f, z, h=1e-5) < 1e-6
