import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_gradient, rel_err
from dino.autodiff import Tensor, grad
from dino.opint import (
    AttentionConfig,
    attention_apply,
    attention_kernel,
    init_int_params,
    int_branch_forward,
    patchify,
    transformer_blocks,
    unpatchify,
    zero_output_projections,
)


def identity_embedding(channels, patch, n_tok):
    d = channels * patch * patch
    return {
        "int.embed.w": Tensor(np.eye(d)),
        "int.embed.b": Tensor(np.zeros(d)),
        "int.pos": Tensor(np.zeros((n_tok, d))),
        "int.unembed.w": Tensor(np.eye(d)),
    }


def random_case(r):
    n = int(r.integers(1, 9))
    m = int(r.integers(1, 9))
    d = int(r.integers(1, 6))
    spread = 10.0 ** r.uniform(-2, 1.5)
    return r.normal(0, spread, (n, d)), r.normal(0, spread, (m, d)), r.normal(0, 3, (m, 2))


class TestPatchify:
    def test_token_count_and_width(self, rng):
        cfg = AttentionConfig(n_layers=1, d_z=16, n_heads=2, patch=4)
        params = init_int_params(cfg, 3, (32, 32), rng, dtype=np.float64)
        seq = patchify(Tensor(rng.standard_normal((3, 32, 32))), 4, params)
        assert seq.n_tokens == 64
        assert seq.tokens.shape == (1, 64, 16)

    @pytest.mark.parametrize("patch,shape", [(2, (8, 8)), (4, (16, 8)), (1, (4, 4))])
    def test_round_trip_with_identity_embedding(self, rng, patch, shape):
        c = 2
        params = identity_embedding(c, patch, (shape[0] // patch) * (shape[1] // patch))
        x = rng.standard_normal((3, c) + shape)
        back = unpatchify(patchify(Tensor(x), patch, params), params).data
        assert np.array_equal(back, x)

    def test_patch_contents(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        params = identity_embedding(1, 2, 4)
        tok = patchify(Tensor(x), 2, params).tokens.data[0]
        np.testing.assert_array_equal(tok[0], [0, 1, 4, 5])
        np.testing.assert_array_equal(tok[1], [2, 3, 6, 7])
        np.testing.assert_array_equal(tok[2], [8, 9, 12, 13])

    def test_indivisible_patch(self, rng):
        cfg = AttentionConfig(n_layers=1, d_z=8, n_heads=2, patch=3)
        with pytest.raises(ValueError, match="patch"):
            init_int_params(cfg, 2, (16, 16), rng)

    def test_head_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            AttentionConfig(d_z=10, n_heads=4)


class TestAttentionKernel:
    """Each invariant over 1,000 random query/key sets with mixed scales."""

    def test_row_sums(self):
        r = np.random.default_rng(0)
        worst = 0.0
        for _ in range(1000):
            q, k, _ = random_case(r)
            kern = attention_kernel(Tensor(q), Tensor(k)).data
            worst = max(worst, np.abs(kern.sum(-1) - 1).max())
        assert worst < 1e-6

    def test_non_negative(self):
        r = np.random.default_rng(1)
        for _ in range(1000):
            q, k, _ = random_case(r)
            assert attention_kernel(Tensor(q), Tensor(k)).data.min() >= 0.0

    def test_convex_hull(self):
        r = np.random.default_rng(2)
        for _ in range(1000):
            q, k, v = random_case(r)
            out = attention_kernel(Tensor(q), Tensor(k)).data @ v
            assert np.all(out >= v.min(0) - 1e-12) and np.all(out <= v.max(0) + 1e-12)

    def test_uniform_logits_average_values(self):
        r = np.random.default_rng(3)
        for _ in range(1000):
            q, k, v = random_case(r)
            out = attention_kernel(Tensor(np.zeros_like(q)), Tensor(k)).data @ v
            np.testing.assert_allclose(out, np.broadcast_to(v.mean(0), out.shape), atol=1e-12)

    def test_length_one(self):
        kern = attention_kernel(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3)))).data
        assert kern.tolist() == [[1.0]]

    def test_large_logits_stay_finite(self):
        q = np.full((2, 4), 1e4)
        kern = attention_kernel(Tensor(q), Tensor(q)).data
        assert np.all(np.isfinite(kern))

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="dim"):
            attention_kernel(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_multihead_rows_stochastic(self, seed):
        r = np.random.default_rng(seed)
        cfg = AttentionConfig(n_layers=1, d_z=8, n_heads=2)
        params = init_int_params(cfg, 1, (8, 8), r, dtype=np.float64)
        _, kern = attention_apply(Tensor(r.standard_normal((2, 5, 8))), params, "int.layer0", 2, return_kernel=True)
        assert kern.shape == (2, 2, 5, 5)
        assert np.abs(kern.data.sum(-1) - 1).max() < 1e-12


class TestBlocks:
    def test_identity_when_projections_zero(self, rng):
        cfg = AttentionConfig(n_layers=3, d_z=16, n_heads=4, patch=4)
        params = init_int_params(cfg, 4, (16, 16), rng, dtype=np.float64)
        zero_output_projections(params)
        x = rng.standard_normal((4, 16, 16))
        assert np.array_equal(int_branch_forward(Tensor(x), cfg, params).data, x)

    def test_not_identity_after_init(self, rng):
        cfg = AttentionConfig(n_layers=2, d_z=16, n_heads=4, patch=4)
        params = init_int_params(cfg, 4, (16, 16), rng, dtype=np.float64)
        x = rng.standard_normal((4, 16, 16))
        assert np.abs(int_branch_forward(Tensor(x), cfg, params).data - x).max() > 1e-6

    def test_permutation_equivariant_without_positions(self, rng):
        cfg = AttentionConfig(n_layers=2, d_z=8, n_heads=2)
        params = init_int_params(cfg, 1, (8, 8), rng, dtype=np.float64)
        z = rng.standard_normal((1, 6, 8))
        perm = rng.permutation(6)
        out = transformer_blocks(Tensor(z), cfg, params).data
        out_perm = transformer_blocks(Tensor(z[:, perm]), cfg, params).data
        np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-12)

    def test_global_receptive_field(self, rng):
        cfg = AttentionConfig(n_layers=1, d_z=16, n_heads=2, patch=4)
        params = init_int_params(cfg, 2, (16, 16), rng, dtype=np.float64)
        x = rng.standard_normal((2, 16, 16))
        y = x.copy()
        y[:, 0, 0] += 1.0
        diff = np.abs(int_branch_forward(Tensor(y), cfg, params).data - int_branch_forward(Tensor(x), cfg, params).data)
        assert diff[:, 12:, 12:].max() > 0  # patch far from the perturbed cell still responds

    def test_gradients_match_fd(self):
        cfg = AttentionConfig(n_layers=2, d_z=4, n_heads=2, patch=4)
        worst = 0.0
        for seed in range(20):
            r = np.random.default_rng(seed)
            params = init_int_params(cfg, 1, (8, 8), r, dtype=np.float64)
            for name, p in params.items():
                if name.endswith((".wo", ".mlp.w2", ".ln1.g", ".bo")):
                    p.data[...] = r.normal(0, 0.5, p.shape) + (1.0 if name.endswith(".g") else 0.0)
            x = r.standard_normal((1, 8, 8))
            names = ["int.embed.w", "int.layer0.wq", "int.layer1.wo", "int.layer0.ln1.g", "int.unembed.w"]
            xt = Tensor(x.copy(), requires_grad=True)
            out = int_branch_forward(xt, cfg, params)
            cot = r.standard_normal(out.shape)
            ad = grad(out, [xt] + [params[n] for n in names], cot)

            def f(xa, *ws):
                local = dict(params)
                local.update({n: Tensor(w) for n, w in zip(names, ws)})
                return int_branch_forward(Tensor(xa), cfg, local).data

            fd = fd_gradient(f, [x] + [params[n].data.copy() for n in names], cot)
            worst = max(worst, *(rel_err(g, d) for g, d in zip(ad, fd)))
        assert worst < 1e-4

    def test_eight_layer_smoke(self, rng):
        cfg = AttentionConfig(n_layers=8, d_z=64, n_heads=4, patch=4)
        params = init_int_params(cfg, 16, (32, 32), rng, dtype=np.float32)
        out = int_branch_forward(Tensor(rng.standard_normal((2, 16, 32, 32)).astype(np.float32)), cfg, params)
        assert out.shape == (2, 16, 32, 32) and out.data.dtype == np.float32
        assert np.all(np.isfinite(out.data))
