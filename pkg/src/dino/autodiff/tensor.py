"""Tensor container, tape recording and the reverse sweep.

Every differentiable value is a :class:`Tensor`. Operations in
:mod:`dino.autodiff.ops` record a backward closure on their output when
gradient recording is enabled and some input requires a gradient. The same
operations propagate forward-mode tangents (``Tensor.tangent``) when an input
carries one, which is how Jacobian-vector products are computed.
"""

from __future__ import annotations

import os
import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "grad_enabled",
    "AutodiffError",
    "as_tensor",
    "DEBUG",
]

DEBUG = os.environ.get("DINO_DEBUG", "") not in ("", "0")

_state = threading.local()


class AutodiffError(ValueError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tangent", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, tangent=None, name=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tangent = None if tangent is None else _as_float_array(tangent, self.data.dtype)
        if self.tangent is not None and self.tangent.shape != self.data.shape:
            raise AutodiffError(
                f"tangent shape {self.tangent.shape} does not match data {self.data.shape}"
            )
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; every path goes through a primitive in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.scale(as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        from . import ops

        return ops.add(as_tensor(other, self.dtype), ops.scale(self, -1.0))

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __mul__(self, c):
        from . import ops

        if isinstance(c, Tensor):
            raise AutodiffError("tensor-tensor products go through matmul/linear")
        return ops.scale(self, float(c))

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self * (1.0 / float(c))

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every recording leaf.

        The graph is released afterwards (one tape per forward pass).
        """
        if grad is None:
            if self.size != 1:
                raise AutodiffError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        grads = _reverse_sweep(self, np.asarray(grad, dtype=self.dtype), None)
        for leaf, g in grads.values():
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        _release(self)


class Parameter(Tensor):
    """A named leaf tensor that always requires a gradient."""

    __slots__ = ()

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _reverse_sweep(root: Tensor, seed: np.ndarray, wanted: set[int] | None):
    """Propagate ``seed`` from ``root``; return ``{id: (leaf, grad)}``.

    With ``wanted`` given, only branches leading to those tensors are visited
    and only their gradients are returned.
    """
    if not root.requires_grad:
        return {}
    if seed.shape != root.shape:
        raise AutodiffError(f"seed shape {seed.shape} does not match output {root.shape}")
    order = _topo_order(root)
    if wanted is not None:
        needed = set()
        for node in order:  # parents precede children in this order
            if id(node) in wanted or any(id(p) in needed for p in node._parents):
                needed.add(id(node))
    else:
        needed = None
    acc = {id(root): seed}
    out = {}
    for node in reversed(order):
        g = acc.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if wanted is None or id(node) in wanted:
                out[id(node)] = (node, g)
            continue
        if wanted is not None and id(node) in wanted:
            out[id(node)] = (node, g)
        needs = tuple(
            p.requires_grad and (needed is None or id(p) in needed) for p in node._parents
        )
        parent_grads = node._backward(g, needs)
        for p, pg, need in zip(node._parents, parent_grads, needs):
            if not need or pg is None:
                continue
            key = id(p)
            acc[key] = pg if key not in acc else acc[key] + pg
    return out


def _release(root: Tensor):
    stack = [root]
    while stack:
        node = stack.pop()
        if node._backward is None:
            continue
        stack.extend(node._parents)
        node._parents = ()
        node._backward = None
