"""Dense tensors with tape-based reverse-mode automatic differentiation.

Only the operations needed by the transformer forward pass and the healing
objective are provided. Binary elementwise ops follow numpy broadcasting and
reduce gradients back onto the operand shapes.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

KL_EPS = 1e-9
ROW_SUM_TOL = 1e-5

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = threading.local()


class DimensionError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class DistributionError(ValueError):
    pass


class RankError(ValueError):
    pass


class GraphReuseError(RuntimeError):
    pass


def _get(name, default):
    return getattr(_state, name, default)


def set_precision(name: str) -> None:
    """Select the global floating point type, ``"f32"`` or ``"f64"``."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state.dtype = _DTYPES[name]


def get_dtype():
    return _get("dtype", np.float64)


@contextlib.contextmanager
def precision(name: str):
    old = get_dtype()
    set_precision(name)
    try:
        yield
    finally:
        _state.dtype = old


def grad_enabled() -> bool:
    return _get("grad", True)


@contextlib.contextmanager
def no_grad():
    old = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or get_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operators
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out._op = op
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# elementwise ------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def rsqrt(x: Tensor) -> Tensor:
    y = 1.0 / np.sqrt(x.data)
    return _make(y, (x,), lambda g: (-0.5 * g * y * y * y,), "rsqrt")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    u = x.data
    inner = _GELU_C * u * (1.0 + 0.044715 * u * u)
    t = np.tanh(inner)
    y = 0.5 * u * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
        return (g * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner),)

    return _make(y, (x,), bw, "gelu")


# reductions and shape ---------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(y), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def take_rows(table: Tensor, index) -> Tensor:
    """Gather rows of a 2-D table; gradient scatter-adds into the table."""
    idx = np.asarray(index, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _make(table.data[idx], (table,), bw, "take_rows")


def band_windows(x: Tensor, window: int) -> Tensor:
    """Left-aligned sliding windows along the sequence axis.

    ``x`` has shape ``[..., n, c]``; the result has shape ``[..., n, window, c]``
    with ``out[..., i, j, :] = x[..., i - window + 1 + j, :]`` and zeros where that
    index is negative.
    """
    n = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(window - 1, 0), (0, 0)]
    padded = np.pad(x.data, pad)
    view = np.lib.stride_tricks.sliding_window_view(padded, window, axis=-2)
    y = np.ascontiguousarray(np.swapaxes(view, -1, -2))

    def bw(g):
        gp = np.zeros(padded.shape, dtype=g.dtype)
        for j in range(window):
            gp[..., j:j + n, :] += g[..., j, :]
        return (gp[..., window - 1:, :],)

    return _make(y, (x,), bw, "band_windows")


# products ---------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-D (a shared weight) or carry the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; every input index must appear in the output or the other operand."""
    inputs, out = subscripts.replace(" ", "").split("->")
    sa, sb = inputs.split(",")

    def bw(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, b.data) if a.requires_grad else None
        gb = np.einsum(f"{out},{sa}->{sb}", g, a.data) if b.requires_grad else None
        return ga, gb

    return _make(np.einsum(subscripts, a.data, b.data), (a, b), bw, "einsum")


# row-wise probability ops -----------------------------------------------------

def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis, with masked-out entries exactly zero."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax_rows: a row has every entry masked out")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax_rows")


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), bw, "log_softmax_rows")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean next-token negative log-likelihood; logits ``[..., V]``, integer targets ``[...]``."""
    t = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if t.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {t.shape} vs logits {logits.shape}")
    flat_t = t.reshape(-1)
    bad = np.flatnonzero((flat_t < 0) | (flat_t >= vocab))
    if bad.size:
        pos = np.unravel_index(bad[0], t.shape)
        raise IndexError(f"cross_entropy: target {flat_t[bad[0]]} at position {tuple(int(p) for p in pos)} "
                         f"outside [0, {vocab})")
    z = logits.data.reshape(-1, vocab)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    m = flat_t.size
    nll = lse - z[np.arange(m), flat_t]
    loss = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(m), flat_t] -= 1.0
        return ((g / m) * p.reshape(logits.shape),)

    return _make(loss, (logits,), bw, "cross_entropy")


def kl_rows(p: Tensor, q: Tensor) -> Tensor:
    """Mean over rows of KL(p_row || q_row); ``q`` is clamped below by ``KL_EPS``."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape or p.ndim != 2:
        raise DimensionError(f"kl_rows expects equal 2-D shapes, got {p.shape} and {q.shape}")
    for name, t in (("p", p), ("q", q)):
        sums = t.data.sum(axis=-1)
        if (t.data < 0).any() or np.abs(sums - 1.0).max() > ROW_SUM_TOL:
            raise DistributionError(f"kl_rows: {name} rows are not probability distributions "
                                    f"(max |row sum - 1| = {np.abs(sums - 1.0).max():.3g})")
    m = p.shape[0]
    pd = p.data
    qc = np.maximum(q.data, KL_EPS)
    pos = pd > 0
    safe_p = np.where(pos, pd, 1.0)
    ratio = np.log(safe_p / qc)
    terms = np.where(pos, pd * ratio, 0.0)
    loss = np.asarray(terms.sum() / m, dtype=pd.dtype)

    def bw(g):
        gp = gq = None
        if p.requires_grad:
            gp = np.where(pos, ratio + 1.0, 0.0) * (g / m)
        if q.requires_grad:
            gq = np.where(q.data > KL_EPS, -pd / qc, 0.0) * (g / m)
        return gp, gq

    return _make(loss, (p, q), bw, "kl_rows")


# backward ---------------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
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
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf with ``requires_grad``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphReuseError("this graph was already consumed by a previous backward()")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node._consumed = True
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
