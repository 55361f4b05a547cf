"""Global integral branch: patch tokens and pre-norm self-attention blocks.

Row ``i`` of the attention matrix is a normalized, data-dependent kernel
``kappa(z_i, .)`` over all ``N`` tokens, so ``sum_j kappa(z_i, z_j) v_j`` is a
quadrature of an integral operator with a learned kernel. No masking is
applied: every token sees the whole domain.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    add,
    as_tensor,
    gelu,
    layer_norm,
    linear,
    matmul,
    reshape,
    scale,
    softmax_lastdim,
    transpose,
)

__all__ = [
    "AttentionConfig",
    "TokenSequence",
    "patchify",
    "unpatchify",
    "attention_kernel",
    "attention_apply",
    "transformer_blocks",
    "int_branch_forward",
    "init_int_params",
    "zero_output_projections",
]


@dataclass(frozen=True)
class AttentionConfig:
    n_layers: int = 8
    d_z: int = 64
    n_heads: int = 4
    mlp_ratio: float = 4.0
    patch: int = 4

    def __post_init__(self):
        if self.d_z % self.n_heads:
            raise ValueError(f"d_z={self.d_z} is not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1 or self.patch < 1:
            raise ValueError("n_layers and patch must be positive")

    @property
    def d_k(self) -> int:
        return self.d_z // self.n_heads

    @property
    def d_mlp(self) -> int:
        return int(round(self.d_z * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenSequence:
    """Tokens ``(B, N, d)`` plus the layout needed to fold them back to a grid."""

    tokens: Tensor
    patch: int
    grid_shape: tuple[int, int]
    channels: int

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[-2]


def _split_patches(x: Tensor, patch: int) -> Tensor:
    B, C, H, W = x.shape
    if H % patch or W % patch:
        raise ValueError(f"patch size {patch} does not divide the grid {H}x{W}")
    gh, gw = H // patch, W // patch
    x = reshape(x, (B, C, gh, patch, gw, patch))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    return reshape(x, (B, gh * gw, C * patch * patch))


def _merge_patches(t: Tensor, patch: int, grid_shape, channels: int) -> Tensor:
    B = t.shape[0]
    H, W = grid_shape
    gh, gw = H // patch, W // patch
    t = reshape(t, (B, gh, gw, channels, patch, patch))
    t = transpose(t, (0, 3, 1, 4, 2, 5))
    return reshape(t, (B, channels, H, W))


def patchify(latent: Tensor, patch: int, params: dict, prefix: str = "int") -> TokenSequence:
    """Non-overlapping ``patch x patch`` cells -> linear embedding + positions."""
    x = as_tensor(latent)
    if x.ndim == 3:
        x = reshape(x, (1,) + x.shape)
    raw = _split_patches(x, patch)
    tokens = linear(raw, params[f"{prefix}.embed.w"], params[f"{prefix}.embed.b"])
    tokens = add(tokens, params[f"{prefix}.pos"])
    return TokenSequence(tokens, patch, x.shape[2:], x.shape[1])


def unpatchify(seq: TokenSequence, params: dict, prefix: str = "int") -> Tensor:
    """Linear map back to ``channels * patch**2`` per token, folded onto the grid."""
    t = linear(seq.tokens, params[f"{prefix}.unembed.w"])
    return _merge_patches(t, seq.patch, seq.grid_shape, seq.channels)


def attention_kernel(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic ``softmax(q k^T / sqrt(d_k))`` over the last axis."""
    q, k = as_tensor(q), as_tensor(k)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    nd = k.ndim
    kt = transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    return softmax_lastdim(scale(matmul(q, kt), 1.0 / math.sqrt(q.shape[-1])))


def _heads(x: Tensor, n_heads: int) -> Tensor:
    B, N, d = x.shape
    return transpose(reshape(x, (B, N, n_heads, d // n_heads)), (0, 2, 1, 3))


def attention_apply(z: Tensor, params: dict, prefix: str, n_heads: int, return_kernel=False):
    """Multi-head attention ``(B, N, d) -> (B, N, d)`` with output mixing ``wo``."""
    z = as_tensor(z)
    B, N, d = z.shape
    q = _heads(linear(z, params[f"{prefix}.wq"]), n_heads)
    k = _heads(linear(z, params[f"{prefix}.wk"]), n_heads)
    v = _heads(linear(z, params[f"{prefix}.wv"]), n_heads)
    kern = attention_kernel(q, k)
    out = transpose(matmul(kern, v), (0, 2, 1, 3))
    out = linear(reshape(out, (B, N, d)), params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    if return_kernel:
        return out, kern
    return out


def transformer_blocks(tokens: Tensor, cfg: AttentionConfig, params: dict, prefix: str = "int") -> Tensor:
    """Pre-norm blocks: ``z += attn(ln1(z)); z += mlp(ln2(z))``."""
    z = as_tensor(tokens)
    for i in range(cfg.n_layers):
        p = f"{prefix}.layer{i}"
        a = attention_apply(
            layer_norm(z, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"]), params, p, cfg.n_heads
        )
        z = add(z, a)
        hmid = gelu(linear(layer_norm(z, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"]),
                           params[f"{p}.mlp.w1"], params[f"{p}.mlp.b1"]))
        z = add(z, linear(hmid, params[f"{p}.mlp.w2"], params[f"{p}.mlp.b2"]))
    return z


def int_branch_forward(latent: Tensor, cfg: AttentionConfig, params: dict, prefix: str = "int") -> Tensor:
    """``x + unpatchify(blocks(z0) - z0)`` with ``z0 = patchify(x)``.

    Only the token increments produced by the blocks are folded back, so the
    branch is exactly the identity when every block output projection is zero.
    """
    x = as_tensor(latent)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    seq = patchify(x, cfg.patch, params, prefix)
    z0 = seq.tokens
    z = transformer_blocks(z0, cfg, params, prefix)
    delta = TokenSequence(add(z, scale(z0, -1.0)), seq.patch, seq.grid_shape, seq.channels)
    out = add(x, unpatchify(delta, params, prefix))
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def init_int_params(
    cfg: AttentionConfig,
    channels: int,
    grid_shape: tuple[int, int],
    rng: np.random.Generator,
    dtype=np.float32,
    prefix: str = "int",
) -> dict:
    H, W = grid_shape
    if H % cfg.patch or W % cfg.patch:
        raise ValueError(f"patch size {cfg.patch} does not divide the grid {H}x{W}")
    n_tok = (H // cfg.patch) * (W // cfg.patch)
    d, dm = cfg.d_z, cfg.d_mlp
    d_in = channels * cfg.patch**2
    shapes: dict[str, tuple[tuple[int, ...], float]] = {
        f"{prefix}.embed.w": ((d_in, d), 1.0 / math.sqrt(d_in)),
        f"{prefix}.embed.b": ((d,), 0.0),
        f"{prefix}.pos": ((n_tok, d), 0.02),
        f"{prefix}.unembed.w": ((d, d_in), 1.0 / math.sqrt(d)),
    }
    for i in range(cfg.n_layers):
        p = f"{prefix}.layer{i}"
        shapes.update({
            f"{p}.ln1.g": ((d,), None),
            f"{p}.ln1.b": ((d,), 0.0),
            f"{p}.wq": ((d, d), 1.0 / math.sqrt(d)),
            f"{p}.wk": ((d, d), 1.0 / math.sqrt(d)),
            f"{p}.wv": ((d, d), 1.0 / math.sqrt(d)),
            f"{p}.wo": ((d, d), 0.02),
            f"{p}.bo": ((d,), 0.0),
            f"{p}.ln2.g": ((d,), None),
            f"{p}.ln2.b": ((d,), 0.0),
            f"{p}.mlp.w1": ((d, dm), 1.0 / math.sqrt(d)),
            f"{p}.mlp.b1": ((dm,), 0.0),
            f"{p}.mlp.w2": ((dm, d), 0.02),
            f"{p}.mlp.b2": ((d,), 0.0),
        })
    params = {}
    for name, (shape, std) in shapes.items():
        if std is None:
            data = np.ones(shape)
        elif std == 0.0:
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, std, size=shape)
        params[name] = Parameter(data, name, dtype=dtype)
    return params


def zero_output_projections(params: dict, prefix: str = "int"):
    """Zero every attention and MLP output projection in place."""
    for name, p in params.items():
        if name.startswith(prefix + ".layer") and name.rsplit(".", 1)[-1] in ("wo", "bo", "w2", "b2"):
            p.data[...] = 0.0
