"""Differentiable primitives.

The arithmetic set is closed: conv2d_circular, linear, matmul,
softmax_lastdim, layer_norm, gelu, add, scale, mean, mse. ``reshape`` and
``transpose`` only relabel memory and are provided as structural helpers.

Each primitive computes its value, records a reverse-mode closure
``backward(g, needs) -> parent grads`` and, when any input carries a tangent,
the forward-mode tangent of the output.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .tensor import DEBUG, AutodiffError, Tensor, as_tensor, grad_enabled

__all__ = [
    "add",
    "scale",
    "matmul",
    "linear",
    "softmax_lastdim",
    "layer_norm",
    "gelu",
    "mean",
    "mse",
    "conv2d_circular",
    "reshape",
    "transpose",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _result(op: str, data, parents, backward, tangent=None) -> Tensor:
    out = Tensor(data)
    if tangent is not None:
        out.tangent = np.asarray(tangent, dtype=out.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    if DEBUG and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return out


def _has_tangent(*ts) -> bool:
    return any(t.tangent is not None for t in ts)


def _tan(t: Tensor) -> np.ndarray:
    return t.tangent if t.tangent is not None else np.zeros_like(t.data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise AutodiffError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    tangent = _tan(a) + _tan(b) if _has_tangent(a, b) else None
    if tangent is not None and tangent.shape != data.shape:
        tangent = np.broadcast_to(tangent, data.shape).copy()
    return _result("add", data, (a, b), backward, tangent)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g, needs):
        return (c * g,)

    tangent = c * a.tangent if a.tangent is not None else None
    return _result("scale", c * a.data, (a,), backward, tangent)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b`` with numpy broadcasting over leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise AutodiffError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise AutodiffError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g, needs):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if needs[0] else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if needs[1] else None
        return ga, gb

    tangent = None
    if _has_tangent(a, b):
        tangent = np.zeros_like(data)
        if a.tangent is not None:
            tangent = tangent + np.matmul(a.tangent, b.data)
        if b.tangent is not None:
            tangent = tangent + np.matmul(a.data, b.tangent)
    return _result("matmul", data, (a, b), backward, tangent)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` has shape ``(in, out)``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise AutodiffError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise AutodiffError(f"linear: bias {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    data = (x2 @ w.data).reshape(*lead, w.shape[1])
    if b is not None:
        data = data + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g, needs):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if needs[0] else None
        gw = x2.T @ g2 if needs[1] else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if needs[2] else None)

    tangent = None
    if _has_tangent(*parents):
        tangent = np.zeros_like(data)
        if x.tangent is not None:
            tangent = tangent + (x.tangent.reshape(-1, w.shape[0]) @ w.data).reshape(data.shape)
        if w.tangent is not None:
            tangent = tangent + (x2 @ w.tangent).reshape(data.shape)
        if b is not None and b.tangent is not None:
            tangent = tangent + b.tangent
    return _result("linear", data, parents, backward, tangent)


def softmax_lastdim(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g, needs):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    tangent = None
    if x.tangent is not None:
        t = x.tangent
        tangent = s * (t - (t * s).sum(axis=-1, keepdims=True))
    return _result("softmax_lastdim", s, (x,), backward, tangent)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise AutodiffError(
            f"layer_norm: gain {gamma.shape}/bias {beta.shape} do not match feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def _norm_adjoint(gh):
        return inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))

    def backward(g, needs):
        gx = _norm_adjoint(g * gamma.data) if needs[0] else None
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if needs[1] else None
        gb = g.sum(axis=lead) if needs[2] else None
        return gx, gg, gb

    tangent = None
    if _has_tangent(x, gamma, beta):
        tangent = np.zeros_like(data)
        if x.tangent is not None:
            # the normalization Jacobian is symmetric, so its adjoint doubles as the JVP
            tangent = tangent + _norm_adjoint(x.tangent) * gamma.data
        if gamma.tangent is not None:
            tangent = tangent + xhat * gamma.tangent
        if beta.tangent is not None:
            tangent = tangent + beta.tangent
    return _result("layer_norm", data, (x, gamma, beta), backward, tangent)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU ``x * Phi(x)``."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    data = x.data * cdf

    def deriv():
        return cdf + x.data * _INV_SQRT_2PI * np.exp(-0.5 * x.data**2)

    def backward(g, needs):
        return (g * deriv(),)

    tangent = x.tangent * deriv() if x.tangent is not None else None
    return _result("gelu", data.astype(x.dtype, copy=False), (x,), backward, tangent)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=x.dtype)
    count = x.size // max(data.size, 1)

    def backward(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    tangent = None
    if x.tangent is not None:
        tangent = x.tangent.mean(axis=axis, keepdims=keepdims)
    return _result("mean", data, (x,), backward, tangent)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of ``(pred - target)**2``."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise AutodiffError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    data = np.asarray(np.mean(diff**2), dtype=pred.dtype)

    def backward(g, needs):
        gd = (2.0 / n) * g * diff
        return (gd if needs[0] else None, -gd if needs[1] else None)

    tangent = None
    if _has_tangent(pred, target):
        tangent = np.asarray((2.0 / n) * np.sum(diff * (_tan(pred) - _tan(target))))
    return _result("mse", data, (pred, target), backward, tangent)


def _circular_cols(x: np.ndarray, s: int) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(B, H, W, C, s, s)`` periodic patch view."""
    r = s // 2
    padded = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="wrap")
    win = np.lib.stride_tricks.sliding_window_view(padded, (s, s), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5)


def _conv_forward(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    B, C, H, W = x.shape
    O, _, s, _ = w.shape
    cols = _circular_cols(x, s).reshape(B * H * W, C * s * s)
    out = cols @ w.reshape(O, C * s * s).T
    return out.reshape(B, H, W, O).transpose(0, 3, 1, 2), cols


def _conv_input_adjoint(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    B, O, H, W = g.shape
    _, C, s, _ = w.shape
    r = s // 2
    # sum over taps of the kernel-weighted gradient shifted back to its source cell
    taps = np.einsum("bohw,ocij->ijbchw", g, w, optimize=True)
    gx = np.zeros((B, C, H, W), dtype=g.dtype)
    for i in range(s):
        for j in range(s):
            gx += np.roll(taps[i, j], shift=(i - r, j - r), axis=(2, 3))
    return gx


def conv2d_circular(x: Tensor, w: Tensor) -> Tensor:
    """Periodic cross-correlation.

    ``out[b, o, h, w] = sum_{c, i, j} w[o, c, i, j] * x[b, c, h + i - r, w + j - r]``
    with indices wrapped, ``r = s // 2``. ``x`` is ``(B, C, H, W)`` and ``w`` is
    ``(O, C, s, s)`` with odd ``s``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise AutodiffError(f"conv2d_circular: input {x.shape} incompatible with kernel {w.shape}")
    if w.shape[2] % 2 == 0:
        raise AutodiffError(f"conv2d_circular: stencil size must be odd, got {w.shape[2]}")
    B, C, H, W = x.shape
    O, _, s, _ = w.shape
    data, cols = _conv_forward(x.data, w.data)

    def backward(g, needs):
        gx = _conv_input_adjoint(g, w.data) if needs[0] else None
        gw = None
        if needs[1]:
            g2 = g.transpose(0, 2, 3, 1).reshape(B * H * W, O)
            gw = (g2.T @ cols).reshape(O, C, s, s)
        return gx, gw

    tangent = None
    if _has_tangent(x, w):
        tangent = np.zeros_like(data)
        if x.tangent is not None:
            tangent = tangent + _conv_forward(x.tangent, w.data)[0]
        if w.tangent is not None:
            tangent = tangent + (cols @ w.tangent.reshape(O, -1).T).reshape(B, H, W, O).transpose(0, 3, 1, 2)
    return _result("conv2d_circular", data, (x, w), backward, tangent)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise AutodiffError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def backward(g, needs):
        return (g.reshape(x.shape),)

    tangent = x.tangent.reshape(shape) if x.tangent is not None else None
    return _result("reshape", data, (x,), backward, tangent)


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g, needs):
        return (g.transpose(inverse),)

    tangent = x.tangent.transpose(axes) if x.tangent is not None else None
    return _result("transpose", x.data.transpose(axes), (x,), backward, tangent)
