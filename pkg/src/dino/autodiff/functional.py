"""Gradients and Jacobian products of functions built from the primitives."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import AutodiffError, Tensor, _reverse_sweep, _release, no_grad

__all__ = ["grad", "jvp", "vjp", "value_and_grad"]


def grad(output: Tensor, inputs: Sequence[Tensor], cotangent=None) -> list[np.ndarray]:
    """Gradients of ``output`` w.r.t. ``inputs`` without touching ``.grad``.

    Inputs that do not influence ``output`` get zero arrays. The tape behind
    ``output`` is released.
    """
    if cotangent is None:
        if output.size != 1:
            raise AutodiffError("grad() of a non-scalar output needs a cotangent")
        cotangent = np.ones_like(output.data)
    seed = np.asarray(cotangent, dtype=output.dtype)
    found = _reverse_sweep(output, seed, {id(t) for t in inputs})
    _release(output)
    return [found[id(t)][1] if id(t) in found else np.zeros_like(t.data) for t in inputs]


def value_and_grad(fn: Callable[..., Tensor], params: Sequence[Tensor], *args):
    out = fn(*args)
    return out, grad(out, params)


def jvp(model_fn: Callable[[Tensor], Tensor], input, direction) -> np.ndarray:
    """Forward-mode ``J v`` of ``model_fn`` at ``input``."""
    x = np.asarray(input.data if isinstance(input, Tensor) else input)
    v = np.asarray(direction.data if isinstance(direction, Tensor) else direction)
    if v.shape != x.shape:
        raise AutodiffError(f"jvp: direction shape {v.shape} does not match input {x.shape}")
    with no_grad():
        out = model_fn(Tensor(x, tangent=v))
    if out.tangent is None:
        # output independent of the input
        return np.zeros_like(out.data)
    return out.tangent


def vjp(model_fn: Callable[[Tensor], Tensor], input, cotangent) -> np.ndarray:
    """Reverse-mode ``J^T w`` of ``model_fn`` at ``input``."""
    x = Tensor(np.asarray(input.data if isinstance(input, Tensor) else input), requires_grad=True)
    out = model_fn(x)
    w = np.asarray(cotangent.data if isinstance(cotangent, Tensor) else cotangent)
    if w.shape != out.shape:
        raise AutodiffError(f"vjp: cotangent shape {w.shape} does not match output {out.shape}")
    return grad(out, [x], w)[0]
