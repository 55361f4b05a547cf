import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_gradient, rel_err
from dino.autodiff import AdamState, Parameter, Tensor, adam_step, grad, mse
from dino.opdiff import (
    ConstrainedKernel,
    DiffBranchConfig,
    central_difference_kernel,
    constrained_conv,
    convergence_order_probe,
    diff_branch_forward,
    effective_kernel,
    first_moments,
    init_diff_params,
)

H = 2 * np.pi / 32


class TestEffectiveKernel:
    def test_constant_slice_vanishes(self):
        k = ConstrainedKernel(Tensor(np.ones((1, 1, 3, 3))))
        assert np.all(effective_kernel(k).data == 0)

    def test_central_stencil_unchanged(self):
        raw = central_difference_kernel("y")
        np.testing.assert_array_equal(effective_kernel(ConstrainedKernel(Tensor(raw))).data, raw)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([3, 5]))
    def test_zero_sum_any_raw(self, seed, s):
        raw = np.random.default_rng(seed).normal(0, 10, size=(3, 2, s, s))
        sums = effective_kernel(ConstrainedKernel(Tensor(raw))).data.sum(axis=(2, 3))
        assert np.abs(sums).max() < 1e-12

    def test_free_returns_raw(self, rng):
        raw = rng.standard_normal((2, 2, 3, 3))
        assert np.array_equal(effective_kernel(ConstrainedKernel(Tensor(raw), constraint="free")).data, raw)

    def test_validation(self):
        with pytest.raises(ValueError):
            ConstrainedKernel(Tensor(np.zeros((1, 1, 2, 2))))
        with pytest.raises(ValueError):
            ConstrainedKernel(Tensor(np.zeros((1, 1, 3, 3))), constraint="other")


class TestConstrainedConv:
    def test_sin_derivative(self):
        n = 256
        h = 2 * np.pi / n
        x = np.arange(n) * h
        field = np.repeat(np.sin(x)[:, None], 3, axis=1)[None, None]
        out = constrained_conv(Tensor(field), ConstrainedKernel(Tensor(central_difference_kernel("x"))), h)
        assert np.abs(out.data[0, 0, :, 1] - np.cos(x)).max() < 1e-3

    def test_constant_annihilated(self, rng):
        k = ConstrainedKernel(Tensor(rng.standard_normal((4, 3, 3, 3))))
        out = constrained_conv(Tensor(np.full((2, 3, 8, 8), 5.3)), k, H)
        assert np.abs(out.data).max() < 1e-12

    def test_one_over_h_scaling(self, rng):
        k = ConstrainedKernel(Tensor(rng.standard_normal((2, 2, 3, 3))))
        x = Tensor(rng.standard_normal((1, 2, 8, 8)))
        a = constrained_conv(x, k, 0.1).data
        b = constrained_conv(x, k, 0.2).data
        np.testing.assert_allclose(b, a / 2, rtol=1e-13)

    def test_order_zero_no_scaling(self, rng):
        k = ConstrainedKernel(Tensor(rng.standard_normal((1, 1, 3, 3))), derivative_order=0)
        x = Tensor(rng.standard_normal((1, 1, 8, 8)))
        np.testing.assert_array_equal(constrained_conv(x, k, 0.1).data, constrained_conv(x, k, 0.5).data)

    @pytest.mark.parametrize("h", [0.0, -1.0])
    def test_bad_spacing(self, h):
        with pytest.raises(ValueError):
            constrained_conv(Tensor(np.zeros((1, 1, 4, 4))), ConstrainedKernel(Tensor(np.zeros((1, 1, 3, 3)))), h)

    def test_gradients_match_fd(self):
        worst = 0.0
        for seed in range(20):
            r = np.random.default_rng(seed)
            x, raw = r.standard_normal((1, 2, 6, 6)), r.standard_normal((2, 2, 3, 3))
            xt, rt = Tensor(x.copy(), requires_grad=True), Tensor(raw.copy(), requires_grad=True)
            out = constrained_conv(xt, ConstrainedKernel(rt), H)
            cot = r.standard_normal(out.shape)
            ad = grad(out, [xt, rt], cot)
            fd = fd_gradient(lambda a, b: constrained_conv(Tensor(a), ConstrainedKernel(Tensor(b)), H).data, [x, raw], cot)
            worst = max(worst, *(rel_err(g, f) for g, f in zip(ad, fd)))
        assert worst < 1e-4


class TestBranch:
    def cfg(self, **kw):
        return DiffBranchConfig(**{"n_layers": 2, "channels": 3, **kw})

    def test_degenerate_weights_identity(self, rng):
        cfg = self.cfg()
        params = {f"diff.layer{i}.raw": Tensor(np.full((3, 3, 3, 3), 2.0)) for i in range(2)}
        x = rng.standard_normal((3, 8, 8))
        assert np.array_equal(diff_branch_forward(Tensor(x), cfg, params, H).data, x)

    def test_single_layer_composition(self):
        from scipy.special import erf

        n = 64
        h = 2 * np.pi / n
        x = np.arange(n) * h
        u = np.repeat(np.sin(x)[:, None], n, axis=1)
        cfg = DiffBranchConfig(n_layers=1, channels=1)
        params = {"diff.layer0.raw": Tensor(central_difference_kernel("x"))}
        out = diff_branch_forward(Tensor(u[None]), cfg, params, h).data[0]
        d = (np.roll(u, -1, 0) - np.roll(u, 1, 0)) / (2 * h)
        np.testing.assert_allclose(out, u + 0.5 * d * (1 + erf(d / np.sqrt(2))), atol=1e-12)
        assert np.abs(d[:, 0] - np.cos(x)).max() < 2e-3

    def test_shape_preserved_and_batched(self, rng):
        cfg = self.cfg()
        params = init_diff_params(cfg, rng, H, dtype=np.float64)
        x = rng.standard_normal((2, 3, 8, 8))
        assert diff_branch_forward(Tensor(x), cfg, params, H).shape == (2, 3, 8, 8)

    def test_channel_mismatch(self, rng):
        cfg = self.cfg()
        params = init_diff_params(cfg, rng, H, dtype=np.float64)
        with pytest.raises(ValueError):
            diff_branch_forward(Tensor(np.zeros((4, 8, 8))), cfg, params, H)

    def test_translation_equivariant(self, rng):
        cfg = self.cfg(n_layers=4)
        params = init_diff_params(cfg, rng, H, dtype=np.float64)
        x = rng.standard_normal((3, 8, 8))
        out = diff_branch_forward(Tensor(x), cfg, params, H).data
        for shift in [(1, 0), (0, 1), (3, 5)]:
            shifted = diff_branch_forward(Tensor(np.roll(x, shift, axis=(1, 2))), cfg, params, H).data
            np.testing.assert_array_equal(shifted, np.roll(out, shift, axis=(1, 2)))

    def test_gradients_match_fd(self):
        cfg = self.cfg()
        worst = 0.0
        for seed in range(20):
            r = np.random.default_rng(seed)
            params = init_diff_params(cfg, r, H, dtype=np.float64)
            names = sorted(params)
            x = r.standard_normal((3, 6, 6))
            xt = Tensor(x.copy(), requires_grad=True)
            out = diff_branch_forward(xt, cfg, params, H)
            cot = r.standard_normal(out.shape)
            ad = grad(out, [xt] + [params[n] for n in names], cot)
            arrays = [x] + [params[n].data.copy() for n in names]

            def f(xa, *raws):
                return diff_branch_forward(Tensor(xa), cfg, {n: Tensor(w) for n, w in zip(names, raws)}, H).data

            fd = fd_gradient(f, arrays, cot)
            worst = max(worst, *(rel_err(g, d) for g, d in zip(ad, fd)))
        assert worst < 1e-4

    def test_constraint_persists_under_adam_f32(self, rng):
        cfg = self.cfg()
        params = init_diff_params(cfg, rng, H, dtype=np.float32)
        x = Tensor(rng.standard_normal((3, 8, 8)).astype(np.float32))
        y = Tensor(rng.standard_normal((3, 8, 8)).astype(np.float32))
        state = AdamState()
        names = sorted(params)
        for _ in range(30):
            loss = mse(diff_branch_forward(x, cfg, params, H), y)
            adam_step(params, dict(zip(names, grad(loss, [params[n] for n in names]))), state, 1e-2)
        for n in names:
            k = ConstrainedKernel(params[n])
            assert np.abs(effective_kernel(k).data.sum(axis=(2, 3))).max() < 1e-7
            out = constrained_conv(Tensor(np.ones((1, 3, 8, 8), np.float32)), k, H).data
            assert np.abs(out).max() < 1e-4  # f32 roundoff of exact zero, then times 1/h

    def test_first_moments_nonzero_at_init(self, rng):
        cfg = DiffBranchConfig(channels=4)
        params = init_diff_params(cfg, rng, H, dtype=np.float64)
        for p in params.values():
            mom = first_moments(ConstrainedKernel(p))
            assert mom.shape == (4, 4, 2)
            assert np.all(np.abs(mom).sum(-1) > 0)

    def test_first_moment_of_central_stencil(self):
        mom = first_moments(ConstrainedKernel(Tensor(central_difference_kernel("x"))))
        np.testing.assert_allclose(mom[0, 0], [1.0, 0.0])


class TestConvergenceOrder:
    def test_central_difference_second_order(self):
        order = convergence_order_probe(ConstrainedKernel(Tensor(central_difference_kernel("x"))), "sin")
        assert 1.8 <= order <= 2.2

    def test_central_difference_along_y(self):
        order = convergence_order_probe(ConstrainedKernel(Tensor(central_difference_kernel("y"))), "sin", axis="y")
        assert 1.8 <= order <= 2.2

    def test_exact_on_linear(self):
        k = ConstrainedKernel(Tensor(central_difference_kernel("x")))
        assert convergence_order_probe(k, "polynomial") == math.inf

    def test_second_derivative_stencil(self):
        k = ConstrainedKernel(Tensor(central_difference_kernel("x", order=2)), derivative_order=2)
        assert 1.8 <= convergence_order_probe(k, "sin") <= 2.2
        assert convergence_order_probe(k, "polynomial") == math.inf

    @pytest.mark.parametrize("seed", range(5))
    def test_free_random_kernel_degenerate(self, seed):
        raw = np.random.default_rng(seed).standard_normal((1, 1, 3, 3))
        order = convergence_order_probe(ConstrainedKernel(Tensor(raw), constraint="free"), "sin")
        assert order < 0.5

    def test_bad_h_list(self):
        k = ConstrainedKernel(Tensor(central_difference_kernel("x")))
        with pytest.raises(ValueError):
            convergence_order_probe(k, "sin", h_list=[0.1, 0.05])
        with pytest.raises(ValueError):
            convergence_order_probe(k, "sin", h_list=[0.05, 0.1, 0.2])
