"""Dense float64 tensors with reverse-mode differentiation.

The operation set is exactly what the document encoder needs: matrix
products, row-masked softmax, a handful of elementwise maps, lookups,
reductions, and the two loss kernels (smooth-L1, cross-entropy).  Data is
kept in contiguous row-major float64 numpy arrays; gradients are plain
arrays of the same shape.  A computation graph is built eagerly by the op
functions and unwound by ``Tensor.backward``.

Tensors are treated as immutable once created, except that leaf parameters
may have their ``data`` buffer rewritten in place by a single writer (the
optimizer, or ``grad_check``'s perturbation loop).
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import DegenerateRowError, NumericError, ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        # order="C" keeps row-major contiguity without promoting 0-d scalars
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this node; accumulates into ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=np.float64).reshape(self.data.shape))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; the op functions below do the work
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled:
        grad_parents = tuple(p for p in parents if p.requires_grad)
        if grad_parents:
            out.requires_grad = True
            out._parents = grad_parents
            out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ndim = tensors[0].data.ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"concat axis {axis} out of range for {ndim}-d input")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(data, tensors, backward)


def slice_(t: Tensor, key) -> Tensor:
    """Basic (non-array) indexing with gradient scatter on the way back."""
    data = t.data[key]

    def backward(g):
        if t.requires_grad:
            full = np.zeros_like(t.data)
            full[key] += g
            t._accumulate(full)

    return _make(np.ascontiguousarray(data), (t,), backward)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    data = t.data.reshape(shape)

    def backward(g):
        if t.requires_grad:
            t._accumulate(g.reshape(t.data.shape))

    return _make(data, (t,), backward)


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        if t.requires_grad:
            t._accumulate(g * out * (1.0 - out))

    return _make(out, (t,), backward)


def gelu(t: Tensor) -> Tensor:
    """GELU in the tanh approximation."""
    x = t.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        if t.requires_grad:
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
            t._accumulate(g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * d_inner))

    return _make(out, (t,), backward)


def layer_norm(t: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale/shift with learnable vectors."""
    x = t.data
    d = x.shape[-1]
    if gain.data.shape != (d,) or shift.data.shape != (d,):
        raise ShapeError(f"layer_norm gain/shift must have shape ({d},)")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if shift.requires_grad:
            shift._accumulate(g.reshape(-1, d).sum(axis=0))
        if t.requires_grad:
            gx = g * gain.data
            t._accumulate(
                inv
                * (
                    gx
                    - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
                )
            )

    return _make(out, (t, gain, shift), backward)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of ``table`` by integer index."""
    idx = np.asarray(indices, dtype=np.int64)
    n_rows = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        bad = idx[(idx < 0) | (idx >= n_rows)][0]
        raise IndexError(f"lookup index {bad} outside table of {n_rows} rows")
    data = table.data[idx]

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table._accumulate(full)

    return _make(data, (table,), backward)


def sum_(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = t.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if t.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            t._accumulate(np.broadcast_to(g, t.data.shape).copy())

    return _make(data, (t,), backward)


def mean(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = t.data.size if axis is None else t.data.shape[axis]
    data = t.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if t.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            t._accumulate(np.broadcast_to(g, t.data.shape) / count)

    return _make(data, (t,), backward)


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax over unmasked entries; masked entries are exactly 0.

    Masked positions are excluded from the normalizing sum rather than
    pushed to -inf, so no non-finite intermediates ever appear.
    """
    mask = np.asarray(mask, dtype=bool)
    x = scores.data
    if x.ndim != 2 or mask.shape != x.shape:
        raise ShapeError(f"masked_softmax needs matching 2-d shapes, got {x.shape} and {mask.shape}")
    if not mask.any(axis=1).all():
        row = int(np.flatnonzero(~mask.any(axis=1))[0])
        raise DegenerateRowError(f"softmax row {row} has no unmasked entries")
    # row max over unmasked entries only, for a stable shift
    shifted = np.where(mask, x, -np.inf)
    row_max = shifted.max(axis=1, keepdims=True)
    ex = np.where(mask, np.exp(np.where(mask, x, row_max) - row_max), 0.0)
    out = ex / ex.sum(axis=1, keepdims=True)

    def backward(g):
        if scores.requires_grad:
            dot = (g * out).sum(axis=1, keepdims=True)
            scores._accumulate(out * (g - dot))

    return _make(out, (scores,), backward)


def scatter_pairs(values: Tensor, rows, cols, n: int) -> Tensor:
    """Place per-pair values into an n x n matrix (zeros elsewhere).

    Pair positions must be unique; the backward pass gathers at the same
    positions.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if values.data.ndim != 1 or values.data.shape[0] != rows.shape[0] or rows.shape != cols.shape:
        raise ShapeError("scatter_pairs needs 1-d values aligned with row/col index arrays")
    data = np.zeros((n, n), dtype=np.float64)
    data[rows, cols] = values.data

    def backward(g):
        if values.requires_grad:
            values._accumulate(g[rows, cols])

    return _make(data, (values,), backward)


def smooth_l1(t: Tensor) -> Tensor:
    """Huber-style loss at beta=1, averaged over every component."""
    x = t.data
    a = np.abs(x)
    small = a < 1.0
    per = np.where(small, 0.5 * x**2, a - 0.5)
    data = np.array(per.mean())

    def backward(g):
        if t.requires_grad:
            d = np.where(small, x, np.sign(x))
            t._accumulate(float(g) * d / x.size)

    return _make(data, (t,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax at the label index.

    ``logits`` may be a single (C,) vector with an int label, or an (n, C)
    matrix with n labels.
    """
    x = logits.data
    if x.ndim == 1:
        x2 = x[None, :]
        lab = np.asarray([labels], dtype=np.int64)
    else:
        x2 = x
        lab = np.asarray(labels, dtype=np.int64)
    n, c = x2.shape
    if lab.shape != (n,):
        raise ShapeError(f"cross_entropy got {n} logit rows but labels of shape {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise IndexError(f"label outside [0, {c})")
    row_max = x2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x2 - row_max).sum(axis=1)) + row_max[:, 0]
    data = np.array((lse - x2[np.arange(n), lab]).mean())

    def backward(g):
        if logits.requires_grad:
            soft = np.exp(x2 - row_max)
            soft /= soft.sum(axis=1, keepdims=True)
            soft[np.arange(n), lab] -= 1.0
            grad = float(g) * soft / n
            logits._accumulate(grad.reshape(x.shape))

    return _make(data, (logits,), backward)


class ParameterRegistry:
    """Named map of trainable tensors with lexicographic iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in sorted(self._params):
            yield name, self._params[name]

    def tensors(self) -> Iterator[Tensor]:
        for name in sorted(self._params):
            yield self._params[name]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None


def grad_check(
    f: Callable[[], Tensor],
    registry: ParameterRegistry,
    eps: float = 1e-5,
    rel_floor: float = 1e-3,
    names: Iterable[str] | None = None,
) -> float:
    """Max relative error of reverse-mode gradients vs central differences.

    ``f`` must be a deterministic scalar function of the registry contents.
    Relative error per component is |a - n| / max(|a|, |n|, rel_floor), so
    vanishing gradients are compared on an absolute scale.
    """
    if not 1e-8 < eps < 1e-3:
        raise ShapeError(f"grad_check eps {eps} outside (1e-8, 1e-3)")
    registry.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check loss is not finite")
    loss.backward()
    check = list(names) if names is not None else registry.names()
    analytic = {
        name: (registry[name].grad.copy() if registry[name].grad is not None
               else np.zeros_like(registry[name].data))
        for name in check
    }
    max_rel = 0.0
    with no_grad():
        for name in check:
            flat = registry[name].data.reshape(-1)
            a_flat = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(f().data)
                flat[i] = orig - eps
                f_minus = float(f().data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                rel = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), rel_floor)
                if rel > max_rel:
                    max_rel = rel
    registry.zero_grad()
    return max_rel
