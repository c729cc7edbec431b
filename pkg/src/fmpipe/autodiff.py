"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps a float64 ndarray and records the op graph as it is
built; ``backward`` walks the graph in reverse topological order and
accumulates gradients into every reachable tensor whose ``requires_grad``
flag is set. Frozen parameters participate in forward computation and the
graph flows *through* them, but nothing is ever accumulated into them.

All scalars are float64. Elementwise hot loops delegate to
``fmpipe.kernels`` so they share the numba/numpy lane selection.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from collections.abc import Callable, Sequence

import numpy as np

from . import _alloc, kernels, rng
from .errors import InputError, ShapeError

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "fmpipe_grad_enabled", default=True
)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """A float64 array plus an optional place in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_nbytes")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        nbytes = arr.nbytes if arr.base is None else 0
        self._nbytes = nbytes
        if nbytes:
            _alloc.tracker.add(nbytes)

    def __del__(self):
        nbytes = getattr(self, "_nbytes", 0)
        if nbytes:
            _alloc.tracker.release(nbytes)

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._backward is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, tracked={self.tracked})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def raw(x) -> np.ndarray:
    """The underlying ndarray of a Tensor, or the array itself."""
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled.get():
        tracked = tuple(p for p in parents if p.tracked)
        if tracked:
            out._parents = tracked
            out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(node) through the recorded graph.

    ``loss`` must be scalar. Gradients accumulate into ``.grad`` of every
    tensor on a path from a ``requires_grad`` tensor to the loss; call sites
    are responsible for zeroing grads between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # free the graph; intermediate grads stay for introspection
            node._backward = None
            node._parents = ()


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        if a.tracked:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.tracked:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = as_tensor(b)
    out_data = a.data - b.data

    def bwd(g):
        if a.tracked:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.tracked:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bwd(g):
        if a.tracked:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.tracked:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out_data = a.data * s

    def bwd(g):
        if a.tracked:
            _accum(a, g * s)

    return _make(out_data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with the standard transpose backward rules."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if a.tracked:
            _accum(a, g @ b.data.T)
        if b.tracked:
            _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul on [N, p, q] @ [N, q, r]; batch dims must match."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"bmm expects matching 3-D batches, got {a.shape} @ {b.shape}")
    if a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm inner dims differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.tracked:
            _accum(a, np.matmul(g, b.data.swapaxes(1, 2)))
        if b.tracked:
            _accum(b, np.matmul(a.data.swapaxes(1, 2), g))

    return _make(out_data, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    in_shape = a.data.shape
    out_data = a.data.reshape(shape)

    def bwd(g):
        if a.tracked:
            _accum(a, g.reshape(in_shape))

    return _make(out_data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def bwd(g):
        if a.tracked:
            _accum(a, g.transpose(inverse))

    return _make(out_data, (a,), bwd)


def first_rows(a: Tensor, n: int) -> Tensor:
    """The first n rows of a 2-D tensor; gradient scatters back into place."""
    out_data = a.data[:n]

    def bwd(g):
        if a.tracked:
            full = np.zeros_like(a.data)
            full[:n] = g
            _accum(a, full)

    return _make(out_data, (a,), bwd)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    count = a.data.shape[axis]
    out_data = a.data.mean(axis=axis)

    def bwd(g):
        if a.tracked:
            expanded = np.broadcast_to(np.expand_dims(g / count, axis), a.data.shape)
            _accum(a, expanded)

    return _make(out_data, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    count = a.data.size
    out_data = np.asarray(a.data.mean())

    def bwd(g):
        if a.tracked:
            _accum(a, np.broadcast_to(g / count, a.data.shape))

    return _make(out_data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        if a.tracked:
            _accum(a, g * (a.data > 0.0))

    return _make(out_data, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    out_data = kernels.gelu_fwd(a.data)

    def bwd(g):
        if a.tracked:
            _accum(a, kernels.gelu_bwd(a.data, g))

    return _make(out_data, (a,), bwd)


def softmax_last(a: Tensor) -> Tensor:
    """Softmax over the last axis; rows sum to one, max-subtracted."""
    shape = a.data.shape
    flat = np.ascontiguousarray(a.data.reshape(-1, shape[-1]))
    y = kernels.softmax_fwd(flat)
    out_data = y.reshape(shape)

    def bwd(g):
        if a.tracked:
            dx = kernels.softmax_bwd(y, np.ascontiguousarray(g.reshape(y.shape)))
            _accum(a, dx.reshape(shape))

    return _make(out_data, (a,), bwd)


def layernorm(a: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis, then apply the affine (gain, shift)."""
    if eps <= 0.0:
        raise InputError(f"layernorm eps must be > 0, got {eps}")
    shape = a.data.shape
    width = shape[-1]
    flat = np.ascontiguousarray(a.data.reshape(-1, width))
    y, xhat, rstd = kernels.layernorm_fwd(flat, gain.data, shift.data, eps)
    out_data = y.reshape(shape)

    def bwd(g):
        dx, dgain, dshift = kernels.layernorm_bwd(
            np.ascontiguousarray(g.reshape(-1, width)), xhat, rstd, gain.data
        )
        if a.tracked:
            _accum(a, dx.reshape(shape))
        if gain.tracked:
            _accum(gain, dgain)
        if shift.tracked:
            _accum(shift, dshift)

    return _make(out_data, (a, gain, shift), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias over the last axis; weight is [d_out, d_in]."""
    d_in = weight.shape[1]
    if x.shape[-1] != d_in:
        raise ShapeError(
            f"linear expects last dim {d_in}, got input shape {x.shape}"
        )
    lead = x.shape[:-1]
    flat = x.reshape((-1, d_in)) if x.ndim != 2 else x
    out = matmul(flat, transpose(weight, (1, 0)))
    if bias is not None:
        out = add(out, bias)
    if x.ndim != 2:
        out = reshape(out, (*lead, weight.shape[0]))
    return out


def dropout(x: Tensor, p: float, key: int) -> Tensor:
    """Inverted dropout with a counter-based mask; deterministic per key."""
    if p <= 0.0:
        return x
    keep = rng.uniform(key, x.size).reshape(x.shape) >= p
    factor = keep / (1.0 - p)
    out_data = x.data * factor

    def bwd(g):
        if x.tracked:
            _accum(x, g * factor)

    return _make(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# losses (all mean-reduced over the batch)
# ---------------------------------------------------------------------------

def mse(pred: Tensor, target) -> Tensor:
    t = raw(target).astype(np.float64, copy=False)
    if pred.shape != t.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    out_data = np.asarray(np.mean(diff * diff))
    count = diff.size

    def bwd(g):
        if pred.tracked:
            _accum(pred, (2.0 / count) * diff * g)

    return _make(out_data, (pred,), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of [B, K] logits against integer labels."""
    y = np.asarray(raw(labels)).astype(np.int64, copy=False)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy expects [B, K] logits and [B] labels, "
            f"got {logits.shape} and {y.shape}"
        )
    n, k = logits.shape
    if y.min() < 0 or y.max() >= k:
        raise InputError(f"label out of class range [0, {k})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    out_data = np.asarray(np.mean(lse - z[np.arange(n), y]))
    probs = kernels.softmax_fwd(np.ascontiguousarray(z))

    def bwd(g):
        if logits.tracked:
            dz = probs.copy()
            dz[np.arange(n), y] -= 1.0
            _accum(logits, dz * (g / n))

    return _make(out_data, (logits,), bwd)


def hinge(scores: Tensor, labels, margin: float = 1.0) -> Tensor:
    """One-vs-rest hinge: per class max(0, margin - y*s), summed over
    classes and mean-reduced over the batch. Subgradient at the kink is 0.
    """
    y = np.asarray(raw(labels)).astype(np.int64, copy=False)
    if scores.ndim != 2 or y.shape != (scores.shape[0],):
        raise ShapeError(
            f"hinge expects [B, K] scores and [B] labels, "
            f"got {scores.shape} and {y.shape}"
        )
    n, k = scores.shape
    if y.min() < 0 or y.max() >= k:
        raise InputError(f"label out of class range [0, {k})")
    signs = np.full((n, k), -1.0)
    signs[np.arange(n), y] = 1.0
    viol = margin - signs * scores.data
    active = viol > 0.0
    out_data = np.asarray(np.where(active, viol, 0.0).sum() / n)

    def bwd(g):
        if scores.tracked:
            _accum(scores, np.where(active, -signs, 0.0) * (g / n))

    return _make(out_data, (scores,), bwd)
