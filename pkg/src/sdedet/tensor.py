"""
Minimal N-D tensor with reverse-mode differentiation.

A ``Tensor`` wraps a numpy array (float32 unless a float64 array is passed in
explicitly) and, when any operand requires a gradient, remembers its parents
and a backward rule. ``backward`` linearises that graph into a ``GradTape``
and replays it from a scalar loss.

Only the operations this package composes are differentiable; this is not a
general autodiff framework.
"""
from __future__ import annotations

from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """Array plus optional gradient bookkeeping.

    Tensors are treated as immutable once produced by an op; kernels never
    write into their inputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.name = name

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        from .ops import matmul

        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method sugar ----------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], rule: BackwardFn) -> Tensor:
    """Wrap ``data`` and attach ``rule`` if any parent is differentiable."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------
class GradTape:
    """Operations reachable from a loss, in topological (forward) order."""

    def __init__(self, loss: Tensor):
        self.loss = loss
        self.nodes: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self):
        return len(self.nodes)

    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if n.is_leaf]

    def replay(self) -> None:
        grads = {id(self.loss): np.ones_like(self.loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.astype(node.data.dtype, copy=False)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    pg = unbroadcast(pg, parent.shape)
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def backward(loss: Tensor) -> GradTape:
    """Populate ``.grad`` on every differentiable leaf that ``loss`` depends on.

    Existing leaf gradients are overwritten, not accumulated.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad=True")
    tape = GradTape(loss)
    tape.replay()
    return tape


def finite_diff_grad(f: Callable[[Tensor], Tensor], x, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` receives a fresh constant Tensor for each probe, so no tape is built.
    """
    base = np.array(as_tensor(x).data, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(np.asarray(as_tensor(f(Tensor(base.copy()))).data).sum())
        flat[i] = orig - h
        fm = float(np.asarray(as_tensor(f(Tensor(base.copy()))).data).sum())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------
def _scalar(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def add(a, b) -> Tensor:
    if _scalar(b):
        a = as_tensor(a)
        return make_result(a.data + b, (a,), lambda g: (g,))
    if _scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if _scalar(b):
        return add(a, -b)
    if _scalar(a):
        return add(mul(b, -1.0), a)
    a, b = as_tensor(a), as_tensor(b)
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if _scalar(b):
        a = as_tensor(a)
        return make_result(a.data * b, (a,), lambda g: (g * b,))
    if _scalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    if _scalar(b):
        return mul(a, 1.0 / b)
    if _scalar(a):
        b = as_tensor(b)
        out = a / b.data
        return make_result(out, (b,), lambda g: (-g * out / b.data,))
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_result(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return make_result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------
def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return make_result(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size // max(out.size, 1)

    def rule(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return make_result(out, (a,), rule)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return make_result(out, (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)

    def rule(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out), (a,), rule)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty list")
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, ts, rule)


def split(a, sizes: Sequence[int], axis: int = 0) -> List[Tensor]:
    a = as_tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis {axis} of {a.shape}")
    pieces, start = [], 0
    for size in sizes:
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + size)
        pieces.append(getitem(a, tuple(index)))
        start += size
    return pieces
