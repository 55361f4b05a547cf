"""Local differential branch built from moment-constrained convolutions.

A plain convolution ``sum_j K_j u(x - j h)`` tends to ``u(x) * sum_j K_j`` as
``h -> 0``, which carries no derivative information. Forcing ``sum_j K_j = 0``
and scaling the output by ``1/h**p`` turns the stencil into a consistent
finite-difference approximation of a ``p``-th derivative.

Kernel layout is ``(c_out, c_in, s, s)``; tap ``(i, j)`` reads the input at
offset ``(i - s//2, j - s//2)`` along (x, y), see
:func:`dino.autodiff.conv2d_circular`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Parameter, Tensor, add, as_tensor, conv2d_circular, gelu, mean, reshape, scale

__all__ = [
    "ConstrainedKernel",
    "DiffBranchConfig",
    "effective_kernel",
    "constrained_conv",
    "diff_branch_forward",
    "init_diff_params",
    "central_difference_kernel",
    "first_moments",
    "convergence_order_probe",
]


@dataclass
class ConstrainedKernel:
    raw: Tensor
    derivative_order: int = 1
    constraint: str = "zero_mean"

    def __post_init__(self):
        self.raw = as_tensor(self.raw)
        if self.raw.ndim != 4 or self.raw.shape[2] != self.raw.shape[3]:
            raise ValueError(f"kernel must be (c_out, c_in, s, s), got {self.raw.shape}")
        if self.raw.shape[2] % 2 == 0:
            raise ValueError(f"stencil size must be odd, got {self.raw.shape[2]}")
        if self.derivative_order < 0:
            raise ValueError("derivative order must be non-negative")
        if self.constraint not in ("zero_mean", "free"):
            raise ValueError(f"unknown constraint {self.constraint!r}")


@dataclass(frozen=True)
class DiffBranchConfig:
    n_layers: int = 4
    channels: int = 16
    stencil: int = 3
    derivative_order: int = 1
    constraint: str = "zero_mean"
    activation: str = "gelu"

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.stencil % 2 == 0:
            raise ValueError("stencil must be odd")
        if self.activation != "gelu":
            raise ValueError("only the gelu activation is supported")

    def to_dict(self) -> dict:
        return asdict(self)


def effective_kernel(k: ConstrainedKernel) -> Tensor:
    """Kernel actually applied: ``raw`` minus its per-slice mean when zero_mean."""
    if k.constraint == "free":
        return k.raw
    return add(k.raw, scale(mean(k.raw, axis=(2, 3), keepdims=True), -1.0))


def constrained_conv(x: Tensor, k: ConstrainedKernel, h: float) -> Tensor:
    if not h > 0:
        raise ValueError(f"grid spacing must be positive, got {h}")
    out = conv2d_circular(x, effective_kernel(k))
    if k.derivative_order == 0:
        return out
    return scale(out, h ** (-k.derivative_order))


def init_diff_params(cfg: DiffBranchConfig, rng: np.random.Generator, h: float, dtype=np.float32):
    c, s = cfg.channels, cfg.stencil
    std = 0.5 * h**cfg.derivative_order / math.sqrt(c * s * s)
    return {
        f"diff.layer{i}.raw": Parameter(
            rng.normal(0.0, std, size=(c, c, s, s)), f"diff.layer{i}.raw", dtype=dtype
        )
        for i in range(cfg.n_layers)
    }


def diff_branch_forward(latent: Tensor, cfg: DiffBranchConfig, params: dict, h: float) -> Tensor:
    """``n_layers`` of ``x <- x + gelu(constrained_conv(x))``; shape preserved."""
    x = as_tensor(latent)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != cfg.channels:
        raise ValueError(f"latent shape {latent.shape} does not match {cfg.channels} channels")
    for i in range(cfg.n_layers):
        k = ConstrainedKernel(params[f"diff.layer{i}.raw"], cfg.derivative_order, cfg.constraint)
        x = add(x, gelu(constrained_conv(x, k, h)))
    if squeeze:
        x = reshape(x, x.shape[1:])
    return x


def central_difference_kernel(axis: str = "x", order: int = 1, stencil: int = 3) -> np.ndarray:
    """Second-order central stencil as a ``(1, 1, s, s)`` kernel (before 1/h**p)."""
    if order == 1:
        taps = {-1: -0.5, 1: 0.5}
    elif order == 2:
        taps = {-1: 1.0, 0: -2.0, 1: 1.0}
    else:
        raise ValueError("central stencils are provided for orders 1 and 2")
    k = np.zeros((1, 1, stencil, stencil))
    r = stencil // 2
    for off, val in taps.items():
        if axis == "x":
            k[0, 0, r + off, r] = val
        elif axis == "y":
            k[0, 0, r, r + off] = val
        else:
            raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    return k


def first_moments(k: ConstrainedKernel) -> np.ndarray:
    """``sum_j K_j * j`` per slice as ``(c_out, c_in, 2)``; nonzero is required."""
    kern = effective_kernel(k).data
    s = kern.shape[2]
    off = np.arange(s) - s // 2
    mx = np.einsum("ocij,i->oc", kern, off)
    my = np.einsum("ocij,j->oc", kern, off)
    return np.stack([mx, my], axis=-1)


def _probe(kind: str, n: int, h: float, p: int):
    x = np.arange(n) * h
    if kind == "sin":
        u = np.sin(x)
        target = np.sin(x + p * np.pi / 2)
    elif kind == "polynomial":
        c = x - 0.5 * n * h
        u = c**p / math.factorial(p)
        target = np.ones_like(x) if p > 0 else u
    else:
        raise ValueError(f"unknown probe {kind!r}")
    return u, target


def convergence_order_probe(
    k: ConstrainedKernel, probe: str = "sin", h_list=None, axis: str = "x", length: float = 2 * np.pi
) -> float:
    """Observed order of ``constrained_conv`` against the exact ``p``-th derivative.

    Uses the ``(0, 0)`` slice of the kernel on samples varying along ``axis``.
    Grid sizes are ``round(length / h)``. The polynomial probe is not periodic,
    so only cells at least one stencil radius from the seam are scored.
    Returns ``math.inf`` when every error sits at the roundoff floor
    ``64 * eps * max|u| / h**p`` (exact stencil).
    """
    if h_list is None:
        h_list = [length / n for n in (64, 128, 256, 512)]
    h_list = [float(h) for h in h_list]
    if len(h_list) < 3 or any(b >= a for a, b in zip(h_list, h_list[1:])):
        raise ValueError("h_list must be strictly decreasing with at least 3 entries")
    p = k.derivative_order
    kern = ConstrainedKernel(Tensor(k.raw.data[:1, :1].astype(np.float64)), p, k.constraint)
    s = kern.raw.shape[2]
    r = s // 2
    errors, floors = [], []
    for h in h_list:
        n = int(round(length / h))
        u, target = _probe(probe, n, h, p)
        field = np.repeat(u[:, None], s, axis=1) if axis == "x" else np.repeat(u[None, :], s, axis=0)
        out = constrained_conv(Tensor(field[None, None]), kern, h).data[0, 0]
        line = out[:, r] if axis == "x" else out[r, :]
        err = np.abs(line - target)
        if probe == "polynomial":
            err = err[r + 1 : n - r - 1]
        errors.append(float(err.max()))
        floors.append(64 * np.finfo(np.float64).eps * max(np.abs(u).max(), 1.0) / h**p)
    errors = np.array(errors)
    if np.all(errors <= np.array(floors)):
        return math.inf
    slope = np.polyfit(np.log(h_list), np.log(np.maximum(errors, 1e-300)), 1)[0]
    return float(slope)
