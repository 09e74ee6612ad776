"""Dense float32 tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major contiguous ``numpy`` float32 array. Operations
build a dynamic tape: each output remembers its inputs and a closure that maps
the output gradient to input gradients. ``backward`` topologically sorts the
tape and accumulates gradients additively into every node that requires them.

Gradients are only tracked when at least one input has ``requires_grad`` set,
so forward passes over frozen weights record nothing and run at plain numpy
speed. Tensors are treated as immutable once returned from an operation; only
``Parameter`` values are updated in place, by the optimizers.

Matrix multiplies are the package's unit of compute accounting: the
``mac_counter`` context manager counts one multiply-accumulate per scalar
product term of every ``matmul`` executed inside it.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import NumericError, ShapeError

__all__ = [
    "Tensor",
    "as_tensor",
    "mac_counter",
    "MacCounter",
    "matmul",
    "layer_norm",
    "gelu",
    "softmax",
    "log_softmax",
    "sigmoid",
    "log_sigmoid",
    "concat",
    "transpose",
    "index_rows",
    "gather_rows",
    "backward",
]

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


class MacCounter:
    """Accumulates exact multiply-accumulate counts from matmul calls."""

    def __init__(self) -> None:
        self.macs: int = 0


_ACTIVE_COUNTERS: list[MacCounter] = []


@contextmanager
def mac_counter() -> Iterator[MacCounter]:
    """Count MACs of every matmul executed in this context."""
    counter = MacCounter()
    _ACTIVE_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTERS.remove(counter)


@contextmanager
def pause_macs() -> Iterator[None]:
    """Hide the enclosed matmuls from every counter currently active.

    Lets bookkeeping work (score probes, diagnostics) run inside a metered
    forward without inflating its count; a fresh ``mac_counter`` opened
    inside the pause still sees the enclosed work.
    """
    saved = list(_ACTIVE_COUNTERS)
    _ACTIVE_COUNTERS.clear()
    try:
        yield
    finally:
        _ACTIVE_COUNTERS.extend(saved)


def _record_matmul_macs(a_shape: tuple[int, ...], b_shape: tuple[int, ...]) -> None:
    if not _ACTIVE_COUNTERS:
        return
    m, k = a_shape[-2], a_shape[-1]
    n = b_shape[-1]
    batch = 1
    out_batch = np.broadcast_shapes(a_shape[:-2], b_shape[:-2])
    for d in out_batch:
        batch *= d
    macs = batch * m * k * n
    for counter in _ACTIVE_COUNTERS:
        counter.macs += macs


class Tensor:
    """A float32 array plus optional autograd bookkeeping.

    ``array`` is the value, ``grad`` (a plain ndarray, lazily allocated)
    accumulates d(loss)/d(self) during ``backward``.
    """

    __slots__ = ("array", "grad", "requires_grad", "_prev", "_backward")

    def __init__(
        self,
        array,
        requires_grad: bool = False,
        _prev: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], tuple] | None = None,
    ) -> None:
        arr = np.ascontiguousarray(array, dtype=np.float32)
        self.array = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev = _prev
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major float32 buffer (length = product of shape)."""
        return self.array.reshape(-1)

    def item(self) -> float:
        return float(self.array.item())

    def detach(self) -> "Tensor":
        return Tensor(self.array)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return add(self, mul(other, -1.0))

    def __rsub__(self, other) -> "Tensor":
        return add(other, mul(self, -1.0))

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __truediv__(self, other) -> "Tensor":
        return mul(self, pow_scalar(as_tensor(other), -1.0))

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return getitem(self, key)

    # -- method aliases -------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(out_arr, prev: tuple[Tensor, ...], backward_builder) -> Tensor:
    """Wrap an op result; attach the backward closure only when needed."""
    requires = any(p.requires_grad for p in prev)
    out = Tensor(out_arr, requires_grad=requires, _prev=prev if requires else ())
    if requires:
        out._backward = backward_builder()
    return out


# -- primitive ops ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_arr = a.array + b.array

    def build():
        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return bw

    return _make(out_arr, (a, b), build)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_arr = a.array * b.array

    def build():
        def bw(g):
            return (
                _unbroadcast(g * b.array, a.shape),
                _unbroadcast(g * a.array, b.shape),
            )

        return bw

    return _make(out_arr, (a, b), build)


def pow_scalar(a, p: float) -> Tensor:
    a = as_tensor(a)
    out_arr = a.array**np.float32(p)

    def build():
        def bw(g):
            return (g * np.float32(p) * a.array ** np.float32(p - 1.0),)

        return bw

    return _make(out_arr, (a,), build)


def texp(a) -> Tensor:
    a = as_tensor(a)
    out_arr = np.exp(a.array)

    def build():
        def bw(g):
            return (g * out_arr,)

        return bw

    return _make(out_arr, (a,), build)


def tlog(a) -> Tensor:
    a = as_tensor(a)
    out_arr = np.log(a.array)

    def build():
        def bw(g):
            return (g / a.array,)

        return bw

    return _make(out_arr, (a,), build)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    a_inner = a.shape[-1]
    b_inner = b.shape[-2] if b.ndim > 1 else b.shape[0]
    if a_inner != b_inner:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    _record_matmul_macs(a.shape if a.ndim > 1 else (1,) + a.shape, b.shape)
    out_arr = a.array @ b.array

    def build():
        def bw(g):
            ga = g @ np.swapaxes(b.array, -1, -2) if b.ndim > 1 else np.outer(g, b.array)
            gb = np.swapaxes(a.array, -1, -2) @ g if a.ndim > 1 else np.outer(a.array, g)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return bw

    return _make(out_arr, (a, b), build)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out_arr = a.array.reshape(shape)

    def build():
        def bw(g):
            return (g.reshape(a.shape),)

        return bw

    return _make(out_arr, (a,), build)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out_arr = np.ascontiguousarray(a.array.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def build():
        def bw(g):
            return (g.transpose(inverse),)

        return bw

    return _make(out_arr, (a,), build)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    out_arr = np.concatenate([p.array for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def build():
        def bw(g):
            splits = np.cumsum(sizes[:-1])
            return tuple(np.split(g, splits, axis=axis))

        return bw

    return _make(out_arr, tuple(parts), build)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out_arr = a.array[key]
    # Scalar promotion in _make can widen the output (and thus the incoming
    # gradient) relative to what the key actually indexes; undo that here.
    sub_shape = out_arr.shape

    def build():
        def bw(g):
            full = np.zeros_like(a.array)
            np.add.at(full, key, g.reshape(sub_shape))
            return (full,)

        return bw

    return _make(np.ascontiguousarray(out_arr), (a,), build)


def index_rows(a, idx) -> Tensor:
    """Select rows of ``a`` along its first axis: ``a[idx]``.

    ``idx`` may be any integer array; used for embedding lookups and
    single-sequence token selection. Backward scatters with duplicate
    accumulation.
    """
    a = as_tensor(a)
    idx = np.asarray(idx)
    out_arr = a.array[idx]

    def build():
        def bw(g):
            full = np.zeros_like(a.array)
            np.add.at(full, idx, g)
            return (full,)

        return bw

    return _make(out_arr, (a,), build)


def gather_rows(a, idx) -> Tensor:
    """Batched row selection: ``a[b, idx[b]]`` for ``a[B,n,d]``, ``idx[B,m]``."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if a.ndim != 3 or idx.ndim != 2 or a.shape[0] != idx.shape[0]:
        raise ShapeError(f"gather_rows expects [B,n,d] and [B,m], got {a.shape}, {idx.shape}")
    batch_ix = np.arange(a.shape[0])[:, None]
    out_arr = a.array[batch_ix, idx]

    def build():
        def bw(g):
            full = np.zeros_like(a.array)
            np.add.at(full, (batch_ix, idx), g)
            return (full,)

        return bw

    return _make(out_arr, (a,), build)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_arr = a.array.sum(axis=axis, keepdims=keepdims)

    def build():
        def bw(g):
            g = np.asarray(g, dtype=np.float32)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).astype(np.float32, copy=False),)

        return bw

    return _make(out_arr, (a,), build)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- fused neural-net primitives ----------------------------------------


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ShapeError(f"layer_norm eps must be positive, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm feature dim mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    mu = x.array.mean(axis=-1, keepdims=True)
    var = x.array.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = (x.array - mu) * inv
    out_arr = xhat * gamma.array + beta.array

    def build():
        def bw(g):
            g_gamma = (g * xhat).sum(axis=tuple(range(g.ndim - 1)))
            g_beta = g.sum(axis=tuple(range(g.ndim - 1)))
            gx_hat = g * gamma.array
            m1 = gx_hat.mean(axis=-1, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            g_x = (gx_hat - m1 - xhat * m2) * inv
            return g_x.astype(np.float32, copy=False), g_gamma, g_beta

        return bw

    return _make(out_arr, (x, gamma, beta), build)


def gelu(x) -> Tensor:
    """GELU, tanh form: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = as_tensor(x)
    xa = x.array
    inner = _GELU_C * (xa + _GELU_A * xa**3)
    t = np.tanh(inner)
    out_arr = 0.5 * xa * (1.0 + t)

    def build():
        def bw(g):
            sech2 = 1.0 - t * t
            d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * xa**2)
            grad = 0.5 * (1.0 + t) + 0.5 * xa * sech2 * d_inner
            return (g * grad.astype(np.float32, copy=False),)

        return bw

    return _make(out_arr, (x,), build)


def softmax(x, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.array - x.array.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_arr = e / e.sum(axis=axis, keepdims=True)

    def build():
        def bw(g):
            dot = (g * out_arr).sum(axis=axis, keepdims=True)
            return ((out_arr * (g - dot)).astype(np.float32, copy=False),)

        return bw

    return _make(out_arr, (x,), build)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"log_softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.array - x.array.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_arr = shifted - lse

    def build():
        def bw(g):
            sm = np.exp(out_arr)
            return ((g - sm * g.sum(axis=axis, keepdims=True)).astype(np.float32, copy=False),)

        return bw

    return _make(out_arr, (x,), build)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out_arr = 1.0 / (1.0 + np.exp(-x.array))

    def build():
        def bw(g):
            return (g * out_arr * (1.0 - out_arr),)

        return bw

    return _make(out_arr, (x,), build)


def log_sigmoid(x) -> Tensor:
    """log(sigmoid(x)) computed as -log1p(exp(-|x|)) + min(x, 0), stable at large |x|."""
    x = as_tensor(x)
    xa = x.array
    out_arr = np.minimum(xa, 0.0) - np.log1p(np.exp(-np.abs(xa)))

    def build():
        def bw(g):
            # d/dx log sigmoid(x) = sigmoid(-x)
            return (g / (1.0 + np.exp(xa)),)

        return bw

    return _make(out_arr.astype(np.float32), (x,), build)


# -- backward pass ------------------------------------------------------


def backward(loss: Tensor, params=None) -> None:
    """Accumulate d(loss)/d(node) into every reachable node requiring grad.

    ``loss`` must be scalar. Gradients add onto existing ``grad`` buffers, so
    parameters untouched by this loss keep whatever they already hold (zeros
    after a reset). ``params`` is accepted for call-site clarity only; grads
    land on the parameter leaves through the tape regardless.
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.array).all():
        raise NumericError("backward called on a non-finite loss")
    if not loss.requires_grad:
        return

    # Iterative topological sort; tapes can be long for deep forwards.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for child in node._prev:
            if child.requires_grad and id(child) not in visited:
                stack.append((child, False))

    loss.grad = np.ones_like(loss.array)
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for child, g in zip(node._prev, grads):
            if not child.requires_grad or g is None:
                continue
            g = np.asarray(g, dtype=np.float32)
            if child.grad is None:
                child.grad = g.copy()
            else:
                child.grad += g
