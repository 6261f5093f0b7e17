"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built eagerly: every operation returns a new ``Tensor`` holding
its value, its parents, and a closure that routes the upstream gradient to
those parents. Calling :meth:`Tensor.backward` on a scalar walks the graph in
reverse topological order and accumulates ``grad`` on every reachable tensor
(leaves and intermediates alike), which the tests rely on for loss-masking
checks.

Design constraints honored throughout:

* all data is float64, and every operation validates that its result is
  finite (NaN/Inf anywhere is treated as a programming error and raises
  :class:`~geofuse.errors.ContractError`);
* tensors are never mutated after they have been consumed by an op, so
  read-only values can be shared freely across evaluation workers;
* gradient recording can be suspended with :func:`no_grad` (thread-local),
  which makes inference allocation-free apart from the values themselves.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Temporarily disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A dense float64 array plus optional gradient buffer.

    ``requires_grad`` marks a leaf as trainable; results of ops require grad
    whenever any parent does (and recording is enabled).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor initialized with non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_to_array(other))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    # -- autodiff ------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires grad.

        The receiver must be a scalar (shape ``()`` or a single element).
        """
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar loss tensor")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative DFS post-order over the op graph (avoids recursion limits)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Module-level alias for :meth:`Tensor.backward`."""
    loss.backward()


# -- op plumbing -------------------------------------------------------


def _to_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a gradient back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise ContractError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    out._op = op
    return out


# -- elementwise and reduction ops --------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        const = _to_array(b)
        data = a.data + const

        def bwd(g):
            _accumulate(a, _unbroadcast(g, a.shape))

        return _result(data, (a,), bwd, "add")

    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _result(data, (a, b), bwd, "add")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        const = _to_array(b)
        data = a.data * const

        def bwd(g):
            _accumulate(a, _unbroadcast(g * const, a.shape))

        return _result(data, (a,), bwd, "mul")

    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), bwd, "mul")


def tensor_sum(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum())

    def bwd(g):
        _accumulate(x, np.broadcast_to(g, x.shape).astype(np.float64))

    return _result(data, (x,), bwd, "sum")


def tensor_mean(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.asarray(x.data.mean())

    def bwd(g):
        _accumulate(x, np.broadcast_to(g / n, x.shape).astype(np.float64))

    return _result(data, (x,), bwd, "mean")


# -- matrix ops ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product of two rank-2 tensors.

    Backward: dL/da = g @ b^T and dL/db = a^T @ g.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError(f"matmul requires rank-2 tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _result(data, (a, b), bwd, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ContractError("transpose requires a rank-2 tensor")
    data = x.data.T.copy()

    def bwd(g):
        _accumulate(x, g.T)

    return _result(data, (x,), bwd, "transpose")


# -- nonlinearities -------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU via the tanh approximation 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    xd = x.data
    inner = _GELU_C * (xd + _GELU_A * xd**3)
    t = np.tanh(inner)
    data = 0.5 * xd * (1.0 + t)

    def bwd(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
        local = 0.5 * (1.0 + t) + 0.5 * xd * sech2 * d_inner
        _accumulate(x, g * local)

    return _result(data, (x,), bwd, "gelu")


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis of a rank-2 tensor."""
    if x.ndim != 2:
        raise ContractError("softmax expects a rank-2 tensor")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(x, y * (g - dot))

    return _result(y, (x,), bwd, "softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis, with learned gain and bias."""
    if x.ndim != 2:
        raise ContractError("layernorm expects a rank-2 tensor")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def bwd(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, dx)

    return _result(data, (x, gain, bias), bwd, "layernorm")


# -- structural ops -------------------------------------------------------


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack rank-2 tensors along axis 0. Widths must agree."""
    parts = list(parts)
    if not parts:
        raise ContractError("concat_rows requires at least one tensor")
    width = parts[0].shape[1] if parts[0].ndim == 2 else None
    for p in parts:
        if p.ndim != 2 or p.shape[1] != width:
            raise ContractError("concat_rows requires rank-2 tensors of equal width")
    data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accumulate(p, g[lo:hi])

    return _result(data, parts, bwd, "concat_rows")


def interleave_rows(a: Tensor, b: Tensor) -> Tensor:
    """Alternate the rows of two equally-shaped rank-2 tensors: a0,b0,a1,b1,..."""
    if a.ndim != 2 or a.shape != b.shape:
        raise ContractError(f"interleave_rows requires equal rank-2 shapes, got {a.shape} and {b.shape}")
    n, d = a.shape
    data = np.empty((2 * n, d), dtype=np.float64)
    data[0::2] = a.data
    data[1::2] = b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g[0::2])
        if b.requires_grad:
            _accumulate(b, g[1::2])

    return _result(data, (a, b), bwd, "interleave_rows")


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows of a rank-2 tensor; backward scatter-adds into the source."""
    if x.ndim != 2:
        raise ContractError("take_rows expects a rank-2 tensor")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractError("take_rows expects a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"row index out of range for shape {x.shape}")
    data = x.data[idx].copy()

    def bwd(g):
        acc = np.zeros_like(x.data)
        np.add.at(acc, idx, g)
        _accumulate(x, acc)

    return _result(data, (x,), bwd, "take_rows")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not (0 <= start < stop <= x.shape[1]):
        raise ContractError(f"invalid column slice [{start}:{stop}] for shape {x.shape}")
    data = x.data[:, start:stop].copy()

    def bwd(g):
        acc = np.zeros_like(x.data)
        acc[:, start:stop] = g
        _accumulate(x, acc)

    return _result(data, (x,), bwd, "slice_cols")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts or any(p.ndim != 2 or p.shape[0] != parts[0].shape[0] for p in parts):
        raise ContractError("concat_cols requires rank-2 tensors of equal height")
    data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accumulate(p, g[:, lo:hi])

    return _result(data, parts, bwd, "concat_cols")


# -- losses ---------------------------------------------------------------


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax of ``logits`` at the target ids.

    ``logits`` is (M, V); ``targets`` is a length-M id sequence with every id
    in [0, V).
    """
    if logits.ndim != 2:
        raise ContractError("cross_entropy expects rank-2 logits")
    ids = np.asarray(targets, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] != logits.shape[0]:
        raise ContractError("targets must provide one id per logits row")
    if ids.size == 0:
        raise ContractError("cross_entropy requires at least one target")
    if ids.min() < 0 or ids.max() >= logits.shape[1]:
        raise IndexError("target id out of vocabulary range")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    m = ids.shape[0]
    data = np.asarray(-logp[np.arange(m), ids].mean())

    def bwd(g):
        probs = np.exp(logp)
        probs[np.arange(m), ids] -= 1.0
        _accumulate(logits, (float(g) / m) * probs)

    return _result(data, (logits,), bwd, "cross_entropy")


# -- gradient verification -------------------------------------------------


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map ``x`` to a scalar tensor. Returns
    max_i |analytic_i - fd_i| / (|analytic_i| + 1e-8).
    """
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ContractError("finite_difference_check requires a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    fd_flat = fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(x).item()
            flat[i] = orig - h
            lo = f(x).item()
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * h)

    rel = np.abs(analytic - fd) / (np.abs(analytic) + 1e-8)
    return float(rel.max()) if rel.size else 0.0
