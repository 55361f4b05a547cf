import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from conftest import fd_gradient, rel_err
from dino.autodiff import (
    Adam,
    AdamState,
    AutodiffError,
    Parameter,
    Tensor,
    adam_step,
    add,
    conv2d_circular,
    gelu,
    grad,
    jvp,
    layer_norm,
    linear,
    matmul,
    mean,
    mse,
    no_grad,
    reshape,
    scale,
    softmax_lastdim,
    transpose,
    vjp,
)

SEEDS = range(20)


def reference_conv(x, w):
    """Plain loop cross-correlation with wrap-around indexing."""
    B, C, H, W = x.shape
    O, _, s, _ = w.shape
    r = s // 2
    out = np.zeros((B, O, H, W))
    for i in range(s):
        for j in range(s):
            shifted = np.roll(x, shift=(-(i - r), -(j - r)), axis=(2, 3))
            out += np.einsum("oc,bchw->bohw", w[:, :, i, j], shifted)
    return out


# each case: (numpy forward, arg shapes, autodiff op)
PRIMITIVES = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)], lambda a, b: add(a, b)),
    "scale": (lambda a: -1.7 * a, [(2, 5)], lambda a: scale(a, -1.7)),
    "matmul": (lambda a, b: a @ b, [(2, 3, 4), (2, 4, 5)], lambda a, b: matmul(a, b)),
    "linear": (lambda x, w, b: x @ w + b, [(2, 3, 4), (4, 5), (5,)], lambda x, w, b: linear(x, w, b)),
    "softmax_lastdim": (
        lambda a: np.exp(a - a.max(-1, keepdims=True)) / np.exp(a - a.max(-1, keepdims=True)).sum(-1, keepdims=True),
        [(3, 6)],
        softmax_lastdim,
    ),
    "layer_norm": (
        lambda x, g, b: (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * g + b,
        [(3, 5), (5,), (5,)],
        layer_norm,
    ),
    "gelu": (lambda a: 0.5 * a * (1 + erf(a / np.sqrt(2))), [(4, 4)], gelu),
    "mean": (lambda a: a.mean(axis=1, keepdims=True), [(3, 4, 2)], lambda a: mean(a, axis=1, keepdims=True)),
    "mse": (lambda a, b: np.mean((a - b) ** 2), [(3, 4), (3, 4)], mse),
    "conv2d_circular": (reference_conv, [(2, 2, 5, 6), (3, 2, 3, 3)], conv2d_circular),
    "reshape": (lambda a: a.reshape(6, 2), [(3, 4)], lambda a: reshape(a, (6, 2))),
    "transpose": (lambda a: a.transpose(2, 0, 1), [(2, 3, 4)], lambda a: transpose(a, (2, 0, 1))),
}


class TestForwardValues:
    @pytest.mark.parametrize("name", sorted(PRIMITIVES))
    def test_matches_numpy_reference(self, name, rng):
        ref, shapes, op = PRIMITIVES[name]
        arrays = [rng.standard_normal(s) for s in shapes]
        out = op(*[Tensor(a) for a in arrays]).data
        np.testing.assert_allclose(out, ref(*arrays), rtol=1e-12, atol=1e-12)

    def test_gelu_at_zero(self):
        x = Tensor(np.zeros(1), requires_grad=True)
        y = gelu(x)
        assert y.data[0] == 0.0
        y.backward(np.ones(1))
        assert x.grad[0] == pytest.approx(0.5)

    def test_softmax_equal_logits(self):
        np.testing.assert_allclose(softmax_lastdim(Tensor(np.full(4, 3.3))).data, 0.25)

    def test_mse_examples(self):
        assert mse(Tensor(np.ones(3)), Tensor(np.ones(3))).item() == 0.0
        assert mse(Tensor([2.0]), Tensor([0.0])).item() == 4.0

    def test_conv_periodic_padding(self):
        # the stencil reading x[i+1] wraps at the last row
        x = np.arange(8.0).reshape(1, 1, 8, 1) * np.ones((1, 1, 8, 3))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 2, 1] = 1.0
        out = conv2d_circular(Tensor(x), Tensor(w)).data
        np.testing.assert_array_equal(out[0, 0, :, 0], np.roll(np.arange(8.0), -1))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([np.float32, np.float64]))
    def test_softmax_simplex(self, seed, dtype):
        r = np.random.default_rng(seed)
        x = Tensor((5 * r.standard_normal((4, 7))).astype(dtype))
        p = softmax_lastdim(x).data
        assert p.dtype == dtype
        assert np.all(p >= 0)
        tol = 1e-6 if dtype == np.float32 else 1e-12
        assert np.abs(p.sum(-1) - 1).max() < tol


class TestShapeErrors:
    @pytest.mark.parametrize(
        "call,op",
        [
            (lambda: add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,)))), "add"),
            (lambda: matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2)))), "matmul"),
            (lambda: linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2)))), "linear"),
            (lambda: mse(Tensor(np.ones(3)), Tensor(np.ones(4))), "mse"),
            (lambda: conv2d_circular(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3)))), "conv2d_circular"),
            (lambda: reshape(Tensor(np.ones(6)), (4, 2)), "reshape"),
        ],
    )
    def test_error_names_op_and_shapes(self, call, op):
        with pytest.raises(AutodiffError, match=op):
            call()


class TestGradients:
    @pytest.mark.parametrize("name", sorted(PRIMITIVES))
    def test_reverse_mode_vs_central_fd(self, name):
        ref, shapes, op = PRIMITIVES[name]
        worst = 0.0
        for seed in SEEDS:
            r = np.random.default_rng(seed)
            arrays = [r.standard_normal(s) for s in shapes]
            ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
            out = op(*ts)
            cot = r.standard_normal(out.shape)
            ad = grad(out, ts, cot)
            fd = fd_gradient(lambda *a: op(*[Tensor(x) for x in a]).data, arrays, cot)
            worst = max(worst, max(rel_err(g, f) for g, f in zip(ad, fd)))
        assert worst < 1e-4

    def test_mse_gradient_formula(self, rng):
        p, t = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        pt = Tensor(p, requires_grad=True)
        (g,) = grad(mse(pt, Tensor(t)), [pt])
        np.testing.assert_allclose(g, 2 * (p - t) / p.size, rtol=1e-13)

    def test_backward_accumulates_into_leaves(self, rng):
        w = Parameter(rng.standard_normal((3, 2)), "w", dtype=np.float64)
        x = Tensor(rng.standard_normal((4, 3)))
        loss = mse(linear(x, w), Tensor(np.zeros((4, 2))))
        loss.backward()
        expected = x.data.T @ (2 * (x.data @ w.data) / 8)
        np.testing.assert_allclose(w.grad, expected, rtol=1e-12)

    def test_shared_subgraph(self, rng):
        # y = x*x through matmul on both sides uses x twice
        a = rng.standard_normal((3, 3))
        x = Tensor(a.copy(), requires_grad=True)
        y = matmul(x, x)
        cot = rng.standard_normal((3, 3))
        (g,) = grad(y, [x], cot)
        fd = fd_gradient(lambda m: m @ m, [a], cot)[0]
        assert rel_err(g, fd) < 1e-8

    def test_no_grad_records_nothing(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        with no_grad():
            y = gelu(x)
        assert not y.requires_grad

    def test_deterministic(self, rng):
        x = rng.standard_normal((2, 2, 6, 6))
        w = rng.standard_normal((2, 2, 3, 3))
        runs = []
        for _ in range(2):
            wt = Tensor(w.copy(), requires_grad=True)
            out = mse(gelu(conv2d_circular(Tensor(x), wt)), Tensor(np.zeros_like(x)))
            runs.append((out.data.tobytes(), grad(out, [wt])[0].tobytes()))
        assert runs[0] == runs[1]


def two_layer(params):
    w1, b1, w2 = params

    def f(x):
        return linear(gelu(linear(x, Tensor(w1), Tensor(b1))), Tensor(w2))

    return f


class TestJacobianProducts:
    def test_identity(self, rng):
        v = rng.standard_normal((3, 4))
        assert np.array_equal(jvp(lambda x: x, np.zeros((3, 4)), v), v)
        assert np.array_equal(vjp(lambda x: x, np.zeros((3, 4)), v), v)

    def test_linear_map(self, rng):
        A = rng.standard_normal((5, 3))
        f = lambda x: linear(x, Tensor(A.T))
        v, w = rng.standard_normal(3), rng.standard_normal(5)
        np.testing.assert_allclose(jvp(f, np.zeros(3), v), A @ v, rtol=1e-13)
        np.testing.assert_allclose(vjp(f, np.zeros(3), w), A.T @ w, rtol=1e-13)

    @pytest.mark.parametrize("seed", range(5))
    def test_jvp_vs_fd_two_layer(self, seed):
        r = np.random.default_rng(seed)
        f = two_layer([r.standard_normal((4, 8)), r.standard_normal(8), r.standard_normal((8, 3))])
        x, v = r.standard_normal((2, 4)), r.standard_normal((2, 4))
        eps = 1e-6
        fd = (f(Tensor(x + eps * v)).data - f(Tensor(x - eps * v)).data) / (2 * eps)
        assert rel_err(jvp(f, x, v), fd) < 1e-5

    @pytest.mark.parametrize("seed", range(5))
    def test_adjoint_consistency(self, seed):
        r = np.random.default_rng(seed)
        f = two_layer([r.standard_normal((4, 8)), r.standard_normal(8), r.standard_normal((8, 3))])
        x, v, w = r.standard_normal((2, 4)), r.standard_normal((2, 4)), r.standard_normal((2, 3))
        lhs = np.vdot(w, jvp(f, x, v))
        rhs = np.vdot(vjp(f, x, w), v)
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))

    def test_shape_checks(self):
        with pytest.raises(AutodiffError):
            jvp(lambda x: x, np.zeros(3), np.zeros(4))
        with pytest.raises(AutodiffError):
            vjp(lambda x: x, np.zeros(3), np.zeros(4))

    def test_params_untouched(self, rng):
        p = Parameter(rng.standard_normal((3, 3)), "p", dtype=np.float64)
        f = lambda x: linear(x, p)
        vjp(f, rng.standard_normal(3), rng.standard_normal(3))
        jvp(f, rng.standard_normal(3), rng.standard_normal(3))
        assert p.grad is None


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = {"a": Parameter(np.array([1.5, -2.0]), "a", dtype=np.float64)}
        st_ = AdamState()
        adam_step(p, {"a": np.zeros(2)}, st_, 1e-3)
        np.testing.assert_array_equal(p["a"].data, [1.5, -2.0])
        assert st_.t == 1

    def test_first_step_hand_computed(self):
        p = {"x": Parameter(np.array([1.0]), "x", dtype=np.float64)}
        adam_step(p, {"x": np.array([1.0])}, AdamState(), 0.1)
        # m_hat = 1, v_hat = 1 -> step = 0.1 / (1 + 1e-8)
        assert p["x"].data[0] == pytest.approx(1.0 - 0.1 / (1 + 1e-8), abs=1e-15)

    def test_matches_textbook_recursion(self, rng):
        g_seq = rng.standard_normal((5, 3))
        p = {"w": Parameter(np.zeros(3), "w", dtype=np.float64)}
        st_ = AdamState()
        m = v = np.zeros(3)
        x = np.zeros(3)
        for t, g in enumerate(g_seq, 1):
            adam_step(p, {"w": g}, st_, 0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p["w"].data, x, rtol=1e-12, atol=1e-15)
        assert np.all(st_.v["w"] >= 0)

    def test_quadratic(self):
        p = {"x": Parameter(np.array([3.0]), "x", dtype=np.float64)}
        st_ = AdamState()
        for _ in range(100):
            adam_step(p, {"x": 2 * p["x"].data}, st_, 0.1)
        assert abs(p["x"].data[0]) < 0.5

    def test_non_finite_gradient_named(self):
        p = {"int.layer3.wq": Parameter(np.zeros(2), "int.layer3.wq", dtype=np.float64)}
        with pytest.raises(FloatingPointError, match="int.layer3.wq"):
            adam_step(p, {"int.layer3.wq": np.array([1.0, np.nan])}, AdamState(), 1e-3)

    def test_class_wrapper(self):
        p = Parameter(np.array([3.0]), "x", dtype=np.float64)
        opt = Adam({"x": p}, lr=0.1)
        for _ in range(5):
            loss = mse(p, Tensor(np.zeros(1)))
            loss.backward()
            opt.step()
            opt.zero_grad()
        assert p.data[0] < 3.0
