"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a C-contiguous ``numpy.float64`` array (row-major) and
records the operations applied to it.  Calling :func:`backward` on a scalar
result walks the recorded graph in reverse topological order and accumulates
gradients on every node that was reached; :class:`GradTape` adds parameter
bookkeeping on top (every registered parameter ends a backward pass with a
gradient of identical shape, zeros if it did not participate).

All operations have value semantics: inputs are never mutated, and repeating
an identical forward/backward pair produces bit-identical gradients.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, ValidationError

# Guards shared across the package: clamp inside logs, cosine denominators.
EPS_PROB = 1e-12
EPS_NORM = 1e-12

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


def _as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


class Tensor:
    """Dense float64 array plus optional autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar (definitions below) ---------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, axis1=-2, axis2=-1):
        return transpose(self, axis1, axis2)

    def relu(self):
        return relu(self)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)

    def sqrt(self):
        return tsqrt(self)

    def clamp_min(self, floor):
        return clamp_min(self, floor)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(children: Sequence[Tensor]) -> bool:
    if not _GRAD_ENABLED:
        return False
    return any(c.requires_grad or c._prev for c in children)


def _node(data: np.ndarray, children: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _tracked(children):
        out._prev = children
        out._backward = backward_fn(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def run():
            a.grad += _unbroadcast(out.grad, a.shape)
            b.grad += _unbroadcast(out.grad, b.shape)
        return run

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def run():
            a.grad += _unbroadcast(out.grad, a.shape)
            b.grad -= _unbroadcast(out.grad, b.shape)
        return run

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def run():
            a.grad += _unbroadcast(out.grad * b.data, a.shape)
            b.grad += _unbroadcast(out.grad * a.data, b.shape)
        return run

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def run():
            a.grad += _unbroadcast(out.grad / b.data, a.shape)
            b.grad += _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape)
        return run

    return _node(a.data / b.data, (a, b), bw)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)

    def bw(out):
        def run():
            a.grad += out.grad * p * np.power(a.data, p - 1.0)
        return run

    return _node(np.power(a.data, p), (a,), bw)


def matmul(a, b) -> Tensor:
    """Matrix product; supports 2-D operands and stacked (batched) operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def bw(out):
        def run():
            a.grad += _unbroadcast(np.matmul(out.grad, np.swapaxes(b.data, -1, -2)), a.shape)
            b.grad += _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), out.grad), b.shape)
        return run

    return _node(data, (a, b), bw)


def take(a, idx) -> Tensor:
    """Indexing/slicing; integer-array indices accumulate gradients via add.at."""
    a = as_tensor(a)
    data = a.data[idx]

    def bw(out):
        def run():
            np.add.at(a.grad, idx, out.grad)
        return run

    return _node(np.array(data, dtype=np.float64, copy=True), (a,), bw)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(out):
        def run():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.grad += np.broadcast_to(g, a.shape)
        return run

    return _node(data, (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def bw(out):
        def run():
            a.grad += out.grad.reshape(a.shape)
        return run

    return _node(data, (a,), bw)


def transpose(a, axis1=-2, axis2=-1) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        def run():
            a.grad += np.swapaxes(out.grad, axis1, axis2)
        return run

    return _node(np.swapaxes(a.data, axis1, axis2).copy(), (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(out):
        def run():
            a.grad += out.grad * mask
        return run

    return _node(np.where(mask, a.data, 0.0), (a,), bw)


def texp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bw(out):
        def run():
            a.grad += out.grad * data
        return run

    return _node(data, (a,), bw)


def tlog(a) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        def run():
            a.grad += out.grad / a.data
        return run

    return _node(np.log(a.data), (a,), bw)


def tsqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def bw(out):
        def run():
            # Subgradient 0 at exactly 0 (avoids 0 * inf = nan when the
            # upstream gradient vanishes there, e.g. epsilon-guarded cosines).
            safe = np.where(data > 0, data, 1.0)
            a.grad += np.where(data > 0, out.grad * 0.5 / safe, 0.0)
        return run

    return _node(data, (a,), bw)


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient flows only where a > floor."""
    a = as_tensor(a)
    mask = a.data > floor

    def bw(out):
        def run():
            a.grad += out.grad * mask
        return run

    return _node(np.where(mask, a.data, floor), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)

    def bw(out):
        def run():
            offset = 0
            for p, n in zip(parts, sizes):
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(offset, offset + n)
                p.grad += out.grad[tuple(sl)]
                offset += n
        return run

    return _node(data, tuple(parts), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    data = np.stack([p.data for p in parts], axis=axis)

    def bw(out):
        def run():
            for i, p in enumerate(parts):
                p.grad += np.take(out.grad, i, axis=axis)
        return run

    return _node(data, tuple(parts), bw)


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(node) through the recorded graph.

    Gradients are (re)initialized to zero for every node reachable from
    `loss`, so repeated calls on identical graphs give identical results.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for child in node._prev:
            if id(child) not in visited:
                stack_.append((child, False))

    for node in topo:
        node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


class GradTape:
    """Parameter registry plus backward driver.

    After ``tape.backward(loss)`` every registered parameter carries a
    ``grad`` array of identical shape (zeros when the parameter did not
    participate in the loss).
    """

    def __init__(self, params: Iterable[Tensor] = ()):
        self._params: list[Tensor] = []
        for p in params:
            self.register(p)

    def register(self, param: Tensor) -> Tensor:
        param.requires_grad = True
        self._params.append(param)
        return param

    def parameter(self, data) -> Tensor:
        return self.register(Tensor(data))

    @property
    def params(self) -> list[Tensor]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params:
            p.grad = None

    def backward(self, loss: Tensor) -> None:
        self.zero_grad()
        backward(loss)
        for p in self._params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# vector/probability operations
# ---------------------------------------------------------------------------

def softmax(z, axis: int = -1) -> Tensor:
    """Probabilities from logits; shift-invariant and normalized to 1.

    The stabilizing shift by the per-row maximum is a detached constant,
    which leaves both value and gradient exact.
    """
    z = as_tensor(z)
    if z.size == 0:
        raise DimensionError("softmax of an empty tensor")
    shift = np.max(z.data, axis=axis, keepdims=True)
    e = texp(z - Tensor(shift))
    return e / e.sum(axis=axis, keepdims=True)


def _check_distribution_pair(target: Tensor, pred: Tensor, axis: int) -> None:
    if target.shape != pred.shape:
        raise DimensionError(f"distribution shapes differ: {target.shape} vs {pred.shape}")
    for name, t in (("target", target), ("pred", pred)):
        sums = t.data.sum(axis=axis)
        if not np.allclose(sums, 1.0, atol=1e-9, rtol=0.0):
            raise ValidationError(f"{name} does not sum to 1 within 1e-9")


def cross_entropy(target, pred, axis: int = -1) -> Tensor:
    """-sum(target * log(pred)) with the EPS_PROB clamp inside the log.

    1-D inputs give a scalar; batched inputs reduce along `axis` only.
    """
    target, pred = as_tensor(target), as_tensor(pred)
    _check_distribution_pair(target, pred, axis)
    return -(target * tlog(clamp_min(pred, EPS_PROB))).sum(axis=axis)


def kl_divergence(target, pred, axis: int = -1) -> Tensor:
    """sum(target * ln(target / pred)); zero-mass target entries contribute 0."""
    target, pred = as_tensor(target), as_tensor(pred)
    _check_distribution_pair(target, pred, axis)
    log_ratio = tlog(clamp_min(target, EPS_PROB)) - tlog(clamp_min(pred, EPS_PROB))
    return (target * log_ratio).sum(axis=axis)


def cosine_similarity(a, b) -> Tensor:
    """<a, b> / (||a|| * ||b|| + EPS_NORM) for 1-D vectors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_similarity needs equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < 1:
        raise DimensionError("cosine_similarity of empty vectors")
    num = (a * b).sum()
    denom = tsqrt((a * a).sum()) * tsqrt((b * b).sum()) + EPS_NORM
    return num / denom


def finite_difference_grad(f: Callable[[Tensor], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    theta = as_tensor(theta)
    base = theta.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        bumped = base.copy().reshape(-1)
        bumped[i] = base.reshape(-1)[i] + h
        hi = f(Tensor(bumped.reshape(base.shape)))
        bumped[i] = base.reshape(-1)[i] - h
        lo = f(Tensor(bumped.reshape(base.shape)))
        hi = float(hi.item() if isinstance(hi, Tensor) else hi)
        lo = float(lo.item() if isinstance(lo, Tensor) else lo)
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        flat[i] = (hi - lo) / (2.0 * h)
    return grad
