"""Minimal reverse-mode automatic differentiation over dense 2-D arrays.

Every value is a :class:`Tensor` wrapping a float64 numpy array.  Operations
record their inputs and a backward closure when any input requires a
gradient; :func:`backward` walks the recorded graph in reverse topological
order.  Only the operators used by the GNN layers and distillation losses are
provided, and broadcasting is limited to adding a ``(1, d)`` row bias.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Tensor must be at most 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Sugar for the handful of ops that read naturally as operators.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _record(out: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    t = Tensor(out)
    t.op = op
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward
    return t


def _check(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {msg}")


def _check_index(index: np.ndarray, bound: int, op: str) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if index.size and (index.min() < 0 or index.max() >= bound):
        raise IndexError(f"{op}: index out of range [0, {bound})")
    return index


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape[1] == b.shape[0], "matmul", f"inner dims differ {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, "matmul", (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a ``(1, d)`` row broadcast over rows of ``a``."""
    if a.shape == b.shape:
        return _record(a.data + b.data, "add", (a, b), lambda g: (g, g))
    _check(b.shape == (1, a.shape[1]), "add", f"cannot add {b.shape} to {a.shape}")
    return _record(a.data + b.data, "add", (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        return _record(a.data - b.data, "sub", (a, b), lambda g: (g, -g))
    _check(b.shape == (1, a.shape[1]), "sub", f"cannot subtract {b.shape} from {a.shape}")
    return _record(a.data - b.data, "sub", (a, b), lambda g: (g, -g.sum(axis=0, keepdims=True)))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * c, "mul_scalar", (a,), lambda g: (g * c,))


def scalar_mul(a: Tensor, s: Tensor) -> Tensor:
    """Multiply ``a`` by a trainable ``(1, 1)`` scalar tensor."""
    _check(s.shape == (1, 1), "scalar_mul", f"scale must be (1, 1), got {s.shape}")
    sv = s.data[0, 0]

    def bw(g):
        return g * sv, np.array([[np.sum(g * a.data)]])

    return _record(a.data * sv, "scalar_mul", (a, s), bw)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "elementwise_mul", f"shape mismatch {a.shape} vs {b.shape}")
    return _record(a.data * b.data, "elementwise_mul", (a, b), lambda g: (g * b.data, g * a.data))


mul = elementwise_mul


def scale_rows(a: Tensor, coef) -> Tensor:
    """Multiply row ``i`` of ``a`` by the constant ``coef[i]``."""
    c = np.asarray(coef, dtype=DTYPE).reshape(-1, 1)
    _check(c.shape[0] == a.shape[0], "scale_rows", f"{c.shape[0]} coefficients for {a.shape[0]} rows")
    return _record(a.data * c, "scale_rows", (a,), lambda g: (g * c,))


def transpose(a: Tensor) -> Tensor:
    return _record(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    _check(len(tensors) > 0, "concat_cols", "no inputs")
    rows = tensors[0].shape[0]
    _check(all(t.shape[0] == rows for t in tensors), "concat_cols", "row counts differ")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return _record(out, "concat_cols", tuple(tensors), lambda g: tuple(np.split(g, splits, axis=1)))


# ---------------------------------------------------------------- elementwise


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    _check(bool(np.all(a.data > 0)), "log", "non-positive input")
    return _record(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def power(a: Tensor, k: int) -> Tensor:
    k = int(k)
    _check(k >= 1, "power", "exponent must be >= 1")
    out = a.data**k

    def bw(g):
        return (g * k * a.data ** (k - 1),)

    return _record(out, "power", (a,), bw)


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    # d/dx log(sigmoid(x)) = sigmoid(-x)
    sig_neg = np.exp(np.minimum(-x, 0.0)) / (1.0 + np.exp(-np.abs(x)))
    return _record(out, "log_sigmoid", (a,), lambda g: (g * sig_neg,))


# ---------------------------------------------------------------- row-wise


def row_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)

    return _record(p, "row_softmax", (a,), bw)


def row_log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _record(out, "row_log_softmax", (a,), bw)


def row_l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt(np.sum(a.data**2, axis=1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = a.data / denom
    clipped = norm < eps

    def bw(g):
        proj = np.sum(g * out, axis=1, keepdims=True)
        grad = (g - out * proj) / denom
        # below the floor the map is x / eps, a plain scaling
        return (np.where(clipped, g / eps, grad),)

    return _record(out, "row_l2_normalize", (a,), bw)


def row_sum(a: Tensor) -> Tensor:
    n, d = a.shape
    return _record(a.data.sum(axis=1, keepdims=True), "row_sum", (a,), lambda g: (np.broadcast_to(g, (n, d)).copy(),))


def row_mean(a: Tensor) -> Tensor:
    n, d = a.shape
    return _record(a.data.mean(axis=1, keepdims=True), "row_mean", (a,), lambda g: (np.broadcast_to(g / d, (n, d)).copy(),))


def take(a: Tensor, cols) -> Tensor:
    """Pick ``a[i, cols[i]]`` for every row, returning an ``(n, 1)`` column."""
    n, d = a.shape
    cols = _check_index(cols, d, "take")
    _check(cols.size == n, "take", f"{cols.size} column indices for {n} rows")
    rows = np.arange(n)

    def bw(g):
        out = np.zeros((n, d))
        out[rows, cols] = g[:, 0]
        return (out,)

    return _record(a.data[rows, cols].reshape(-1, 1), "take", (a,), bw)


# ---------------------------------------------------------------- index ops


def gather_rows(a: Tensor, index) -> Tensor:
    index = _check_index(index, a.shape[0], "gather_rows")
    n, d = a.shape

    def bw(g):
        return (_scatter(g, index, n),)

    return _record(a.data[index], "gather_rows", (a,), bw)


def _incidence(index: np.ndarray, out_rows: int, weights=None) -> sp.csr_matrix:
    cols = np.arange(index.size)
    w = np.ones(index.size) if weights is None else weights
    return sp.csr_matrix((w, (index, cols)), shape=(out_rows, index.size))


def _scatter(values: np.ndarray, index: np.ndarray, out_rows: int) -> np.ndarray:
    if not index.size:
        return np.zeros((out_rows, values.shape[1]))
    return np.asarray(_incidence(index, out_rows) @ values)


def scatter_sum(a: Tensor, index, out_rows: int) -> Tensor:
    """Row ``k`` of ``a`` is added into output row ``index[k]``."""
    index = _check_index(index, out_rows, "scatter_sum")
    _check(index.size == a.shape[0], "scatter_sum", f"{index.size} indices for {a.shape[0]} rows")
    out = _scatter(a.data, index, out_rows)
    return _record(out, "scatter_sum", (a,), lambda g: (g[index],))


def segment_mean(a: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Mean of the rows sharing a segment id; empty segments give zeros."""
    segment_ids = _check_index(segment_ids, num_segments, "segment_mean")
    _check(segment_ids.size == a.shape[0], "segment_mean", "one segment id per row required")
    counts = np.bincount(segment_ids, minlength=num_segments).astype(DTYPE)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0).reshape(-1, 1)
    out = _scatter(a.data, segment_ids, num_segments) * inv
    return _record(out, "segment_mean", (a,), lambda g: ((g * inv)[segment_ids],))


def propagate(a: Tensor, src, dst, weights, out_rows: int) -> Tensor:
    """Weighted message passing: output row ``dst[k]`` gains ``weights[k] * a[src[k]]``.

    Equivalent to ``scatter_sum(scale_rows(gather_rows(a, src), weights), dst)``
    but evaluated as one sparse product.
    """
    src = _check_index(src, a.shape[0], "propagate")
    dst = _check_index(dst, out_rows, "propagate")
    w = np.asarray(weights, dtype=DTYPE).reshape(-1)
    _check(src.size == dst.size == w.size, "propagate", "src, dst and weights must have equal length")
    m = sp.csr_matrix((w, (dst, src)), shape=(out_rows, a.shape[0]))
    mt = m.T.tocsr()
    return _record(np.asarray(m @ a.data), "propagate", (a,), lambda g: (np.asarray(mt @ g),))


# ---------------------------------------------------------------- normalization


class BatchNormState:
    """Running statistics for :func:`batch_norm_rows`."""

    def __init__(self, width: int, momentum: float = 0.1):
        self.mean = np.zeros((1, width))
        self.var = np.ones((1, width))
        self.momentum = momentum


def batch_norm_rows(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    state: BatchNormState | None = None,
    training: bool = True,
) -> Tensor:
    """Normalize every column over the rows, then apply ``gamma``/``beta``.

    In training mode batch statistics are used (biased variance) and
    ``state`` is updated with momentum; in evaluation mode the running
    statistics from ``state`` are used.
    """
    n, d = x.shape
    _check(gamma.shape == (1, d) and beta.shape == (1, d), "batch_norm_rows", "affine shape mismatch")
    if training or state is None:
        mu = x.data.mean(axis=0, keepdims=True)
        var = x.data.var(axis=0, keepdims=True)
        if state is not None:
            m = state.momentum
            unbiased = var * n / (n - 1) if n > 1 else var
            state.mean = (1 - m) * state.mean + m * mu
            state.var = (1 - m) * state.var + m * unbiased
        batch_stats = True
    else:
        mu, var = state.mean, state.var
        batch_stats = False
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def bw(g):
        dgamma = np.sum(g * xhat, axis=0, keepdims=True)
        dbeta = g.sum(axis=0, keepdims=True)
        gx = g * gamma.data
        if batch_stats:
            dx = inv_std * (gx - gx.mean(axis=0, keepdims=True) - xhat * np.mean(gx * xhat, axis=0, keepdims=True))
        else:
            dx = gx * inv_std
        return dx, dgamma, dbeta

    return _record(out, "batch_norm_rows", (x, gamma, beta), bw)


# ---------------------------------------------------------------- reductions


def reduce_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(np.array([[a.data.sum()]]), "reduce_sum", (a,), lambda g: (np.full(shape, g[0, 0]),))


def reduce_mean(a: Tensor) -> Tensor:
    shape = a.shape
    size = a.data.size
    return _record(np.array([[a.data.mean()]]), "reduce_mean", (a,), lambda g: (np.full(shape, g[0, 0] / size),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared entrywise differences."""
    _check(a.shape == b.shape, "mse", f"shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    size = diff.size

    def bw(g):
        ga = g[0, 0] * 2.0 * diff / size
        return ga, -ga

    return _record(np.array([[np.mean(diff**2)]]), "mse", (a, b), bw)


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    The recorded graph is released afterwards, so a second call on the same
    loss only sees the leaves it is directly attached to.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------- gradient check


class GradCheckError(ArithmeticError):
    pass


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and must rebuild its graph from the current
    values of ``params`` on every call.  The relative error of an entry is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    for p in params:
        p.grad = None
        p.requires_grad = True
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = f().item()
            flat[idx] = orig - eps
            f_minus = f().item()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic[k].reshape(-1)[idx]
            if not (np.isfinite(a) and np.isfinite(numeric)):
                coord = tuple(int(c) for c in np.unravel_index(idx, p.shape))
                raise GradCheckError(f"non-finite gradient at param {k}, coordinate {coord}")
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
