"""Dense float64 tensors with tape-based reverse-mode differentiation.

Deliberately small: exactly the operations the forecaster needs, each one
checked against central finite differences in the test suite. Arrays are
always 64-bit, row-major numpy buffers. Gradients are propagated by
replaying an execution-ordered tape backwards, which visits every node in
reverse topological order by construction.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "tape",
    "no_finite_checks",
    "set_finite_checks",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "tensor_sum",
    "tensor_mean",
    "relu",
    "softmax_rows",
    "layer_norm",
    "dropout",
    "gather_relative",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeError(RuntimeError):
    """Backward pass requested in an invalid tape state."""


_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> None:
    """Globally enable or disable non-finite detection on tensor creation."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


@contextmanager
def no_finite_checks():
    """Temporarily skip per-tensor finiteness validation.

    Used by the training hot loop, which instead checks the scalar loss
    every step and aborts on divergence. Everywhere else the checks stay
    on so NaN/Inf can never pass silently.
    """
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = False
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


class Tensor:
    """A float64 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.is_leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a scalar")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)


class Tape:
    """Execution-ordered record of differentiable operations.

    Replaying the records in reverse is a valid reverse-topological walk,
    since every operation is appended only after its inputs exist.
    """

    __slots__ = ("_records", "_produced")

    def __init__(self):
        self._records: list = []
        self._produced: set = set()

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        self._records.append((out, inputs, vjp))
        self._produced.add(id(out))

    def __len__(self) -> int:
        return len(self._records)


_ACTIVE: Optional[Tape] = None


@contextmanager
def tape():
    """Open a fresh tape; ops executed inside are recorded for backward()."""
    global _ACTIVE
    prev = _ACTIVE
    _ACTIVE = Tape()
    try:
        yield _ACTIVE
    finally:
        _ACTIVE = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    out.is_leaf = False
    if _ACTIVE is not None and out.requires_grad:
        _ACTIVE.record(out, inputs, vjp)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf.

    The loss must be a scalar produced on the currently active tape.
    Repeated calls without clearing gradients keep accumulating.
    """
    tp = _ACTIVE
    if tp is None:
        raise TapeError("backward() called with no active tape")
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tp._produced:
        raise TapeError("loss was not produced on the active tape")

    flows: dict = {id(loss): np.ones_like(loss.data)}
    leaves: dict = {}
    for out, inputs, vjp in reversed(tp._records):
        g = flows.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in flows:
                flows[key] = flows[key] + gi
            else:
                flows[key] = gi
            if t.is_leaf:
                leaves[key] = t
    for key, t in leaves.items():
        g = flows[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.data.shape) if b.requires_grad else None,
        )

    return _make(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (-g,)

    return _make(-a.data, (a,), vjp)


def scale(a, factor: float) -> Tensor:
    """Multiply by a non-differentiable python scalar."""
    a = _as_tensor(a)
    factor = float(factor)

    def vjp(g):
        return (g * factor,)

    return _make(a.data * factor, (a,), vjp)


def matmul(a, b) -> Tensor:
    """Matrix product; backward accumulates dA = dC @ B^T and dB = A^T @ dC.

    Supports plain 2D x 2D, stacked inputs against a 2D weight, and
    batched products where both operands share identical leading dims.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2D operands, got {ad.shape} x {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} x {bd.shape}")

    if bd.ndim == 2:
        out = ad @ bd

        def vjp(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

    elif ad.ndim == bd.ndim and ad.shape[:-2] == bd.shape[:-2]:
        out = ad @ bd

        def vjp(g):
            ga = g @ bd.swapaxes(-1, -2) if a.requires_grad else None
            gb = ad.swapaxes(-1, -2) @ g if b.requires_grad else None
            return ga, gb

    else:
        raise ShapeError(f"unsupported matmul operand shapes: {ad.shape} x {bd.shape}")

    return _make(out, (a, b), vjp)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return _make(a.data.transpose(axes), (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    orig = a.data.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _make(a.data.reshape(shape), (a,), vjp)


def _getitem(a: Tensor, key) -> Tensor:
    ad = a.data

    def vjp(g):
        full = np.zeros_like(ad)
        full[key] = g
        return (full,)

    return _make(ad[key], (a,), vjp)


def tensor_sum(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(np.asarray(a.data.sum()), (a,), vjp)


def tensor_mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size

    def vjp(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _make(np.asarray(a.data.mean()), (a,), vjp)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (out > 0.0),)

    return _make(out, (a,), vjp)


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, stabilised by per-row max subtraction."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(shifted, out=shifted)
    y = shifted
    y /= y.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = np.einsum("...i,...i->...", g, y)[..., None]
        return (y * (g - dot),)

    return _make(y, (x,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean, unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.data.shape[-1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({n},), "
            f"got {gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    out = gain.data * normed + bias.data

    def vjp(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            dn = g * gain.data
            gx = inv * (
                dn
                - dn.mean(axis=-1, keepdims=True)
                - normed * np.mean(dn * normed, axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            ggain = (g * normed).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, n).sum(axis=0)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), vjp)


def dropout(x, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Evaluation mode (or p == 0) is a strict identity and draws nothing
    from the generator.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    keep = rng.random(x.data.shape, dtype=np.float32) >= p
    inv_keep = 1.0 / (1.0 - p)
    out = x.data * keep
    out *= inv_keep

    def vjp(g):
        gx = g * keep
        gx *= inv_keep
        return (gx,)

    return _make(out, (x,), vjp)


def gather_relative(table, index: np.ndarray) -> Tensor:
    """Index a [heads, m] table with an integer [T, T] matrix -> [heads, T, T].

    Backward scatter-adds, so repeated indices accumulate correctly.
    """
    table = _as_tensor(table)
    idx = np.asarray(index)
    td = table.data

    def vjp(g):
        gt = np.zeros_like(td)
        for h in range(td.shape[0]):
            np.add.at(gt[h], idx, g[h])
        return (gt,)

    return _make(td[:, idx], (table,), vjp)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
