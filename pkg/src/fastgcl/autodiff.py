"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Only the operations the FastGCL compute graph needs are provided.  A
:class:`Tape` is activated with ``with Tape() as tape:``; every operation
executed while it is active and touching a tensor that requires a gradient
is recorded, and :meth:`Tape.backward` replays the adjoints in reverse order.
Tapes are thread-local, so independent tapes may run concurrently.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .graph import Adjacency


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    """Row-major 2-D float64 array, optionally tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise ValueError(f"Tensor must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a 1x1 tensor")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed operations plus per-tensor gradient buffers."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._grads: dict[int, np.ndarray] = {}
        self._keep: dict[int, Tensor] = {}
        self._done = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.records.append((out, inputs, backward))

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """Propagate adjoints from ``loss`` to every recorded input."""
        if self._done:
            raise RuntimeError("backward already ran on this tape")
        self._done = True
        if seed is None:
            if loss.data.size != 1:
                raise ValueError("backward from a non-scalar needs an explicit seed")
            seed = np.ones_like(loss.data)
        self._accumulate(loss, np.asarray(seed, dtype=np.float64))
        for out, inputs, backward in reversed(self.records):
            g_out = self._grads.get(id(out))
            if g_out is None:
                continue
            grads = backward(g_out)
            for t, g in zip(inputs, grads):
                if g is not None and t.requires_grad:
                    self._accumulate(t, g)

    def _accumulate(self, t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in self._grads:
            self._grads[key] = self._grads[key] + g
        else:
            self._grads[key] = np.array(g, dtype=np.float64).reshape(t.shape)
            self._keep[key] = t

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient buffer for ``t`` (zeros if nothing flowed into it)."""
        g = self._grads.get(id(t))
        if g is None or self._keep.get(id(t)) is not t:
            return np.zeros(t.shape)
        return g.copy()


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[Tape]:
    st = _stack()
    return st[-1] if st else None


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = track
    out.name = None
    if track:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i in range(2) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Dense linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), backward, "matmul")


# Debug hook for negative-control tests of the gradient checker.
_CORRUPT_ADJOINT = {"enabled": False}


def set_corrupt_adjoint(enabled: bool) -> None:
    """Perturb the spmm edge-weight adjoint (used only to exercise gradcheck failures)."""
    _CORRUPT_ADJOINT["enabled"] = bool(enabled)


def _csr(adj: Adjacency, vals: np.ndarray) -> sp.csr_matrix:
    n = adj.num_nodes
    return sp.csr_matrix((vals, adj.col_idx, adj.row_ptr), shape=(n, n))


def spmm_weighted(
    adj: Adjacency,
    edge_w: Optional[Tensor],
    h: Tensor,
    parallel_rows: int = 0,
) -> Tensor:
    """out[v] = sum over entries (v, u) of coeff * w * h[u]; self-loop weight is 1.

    ``edge_w`` holds one value per directed non-self-loop edge in graph CSR
    order (shape E x 1), or ``None`` for the all-ones sentinel.  Rows are
    reduced sequentially; ``parallel_rows > 1`` splits row blocks over threads
    without changing any per-row reduction order.
    """
    if h.rows != adj.num_nodes:
        raise ValueError(f"spmm: h has {h.rows} rows, adjacency has {adj.num_nodes} nodes")
    if edge_w is not None:
        if edge_w.data.size != adj.num_edge_slots:
            raise ValueError(
                f"spmm: {edge_w.data.size} edge weights for {adj.num_edge_slots} edges")
    vals = adj.entry_values(None if edge_w is None else edge_w.data)
    mat = _csr(adj, vals)
    hd = h.data

    if parallel_rows > 1 and adj.num_nodes > 1:
        bounds = np.linspace(0, adj.num_nodes, parallel_rows + 1).astype(int)
        with ThreadPoolExecutor(parallel_rows) as pool:
            parts = list(pool.map(lambda i: mat[bounds[i]:bounds[i + 1]] @ hd, range(parallel_rows)))
        out = np.vstack(parts)
    else:
        out = mat @ hd
    out = np.asarray(out)

    inputs = (h,) if edge_w is None else (h, edge_w)

    def backward(g):
        dh = np.asarray(mat.T @ g)
        if edge_w is None:
            return (dh,)
        has = adj.edge_slot >= 0
        per_entry = adj.coeffs * np.einsum("ij,ij->i", g[adj.rows], hd[adj.col_idx])
        dw = np.zeros(adj.num_edge_slots)
        np.add.at(dw, adj.edge_slot[has], per_entry[has])
        if _CORRUPT_ADJOINT["enabled"]:
            dw = dw * 1.01 + 1e-3
        return dh, dw.reshape(edge_w.shape)

    return _result(out, inputs, backward, "spmm_weighted")


# ---------------------------------------------------------------------------
# Pointwise operations


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _result(ad * bd, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """max(0, x) + slope * min(0, x); ``slope`` is 1x1 or 1xC."""
    _check_broadcast(x, slope, "prelu")
    xd, sd = x.data, slope.data
    pos = xd > 0
    neg_part = np.where(pos, 0.0, xd)

    def backward(g):
        dx = np.where(pos, g, g * sd)
        return dx, _unbroadcast(g * neg_part, slope.shape)

    return _result(np.where(pos, xd, sd * xd), (x, slope), backward, "prelu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive value")
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated stably."""
    xd = x.data
    out = np.logaddexp(0.0, xd)
    return _result(out, (x,), lambda g: (g * _sigmoid(xd),), "softplus")


ELEMENTWISE = {
    "relu": relu,
    "prelu": prelu,
    "sigmoid": sigmoid,
    "log": log,
    "add": add,
    "sub": sub,
    "mul": mul,
}


def elementwise(op_kind: str, *args: Tensor) -> Tensor:
    try:
        fn = ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# Reductions and structural operations


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; entries at the bounds receive no gradient."""
    inside = (x.data > lo) & (x.data < hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.array([[x.data.sum()]]), (x,),
                   lambda g: (np.full(shape, g[0, 0]),), "sum_all")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ValueError("mean of an empty tensor")
    shape = x.shape
    return _result(np.array([[x.data.sum() / n]]), (x,),
                   lambda g: (np.full(shape, g[0, 0] / n),), "mean_all")


def row_cosine(a: Tensor, b: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Per-row cosine similarity (N x 1); rows with a near-zero norm give 0."""
    if a.shape != b.shape:
        raise ValueError(f"row_cosine: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    na = np.sqrt(np.einsum("ij,ij->i", ad, ad))
    nb = np.sqrt(np.einsum("ij,ij->i", bd, bd))
    dot = np.einsum("ij,ij->i", ad, bd)
    ok = (na >= min_norm) & (nb >= min_norm)
    denom = np.where(ok, na * nb, 1.0)
    cos = np.where(ok, dot / denom, 0.0)

    def backward(g):
        gg = np.where(ok, g[:, 0], 0.0)[:, None]
        inv = (1.0 / denom)[:, None]
        na2 = np.where(ok, na * na, 1.0)[:, None]
        nb2 = np.where(ok, nb * nb, 1.0)[:, None]
        c = cos[:, None]
        da = gg * (bd * inv - c * ad / na2)
        db = gg * (ad * inv - c * bd / nb2)
        return da, db

    return _result(cos[:, None], (a, b), backward, "row_cosine")


def row_dot(z: Tensor, src: np.ndarray, dst: np.ndarray) -> Tensor:
    """out[k] = <z[src[k]], z[dst[k]]> as an (E x 1) tensor."""
    zd = z.data
    zs, zt = zd[src], zd[dst]
    out = np.einsum("ij,ij->i", zs, zt)[:, None]

    def backward(g):
        dz = np.zeros_like(zd)
        np.add.at(dz, src, g * zt)
        np.add.at(dz, dst, g * zs)
        return (dz,)

    return _result(out, (z,), backward, "row_dot")


def segment_sum(h: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    ids = np.asarray(segment_ids, dtype=np.int64)
    if len(ids) != h.rows:
        raise ValueError("segment_sum: segment_ids length differs from h.rows")
    if len(ids) and (ids.min() < 0 or ids.max() >= num_segments):
        raise ValueError("segment_sum: id out of range")
    out = np.zeros((num_segments, h.cols))
    np.add.at(out, ids, h.data)
    return _result(out, (h,), lambda g: (g[ids],), "segment_sum")


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ValueError("concat_cols: empty list")
    if len(tensors) == 1:
        return tensors[0]
    if len({t.rows for t in tensors}) != 1:
        raise ValueError("concat_cols: row counts differ")
    splits = np.cumsum([t.cols for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=1)), "concat_cols")


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Max over all entries of |analytic - central difference| / max(1, |central difference|).

    ``f`` must rebuild its computation from ``params`` on every call.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
    if loss.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    tape.backward(loss)
    analytic = [tape.grad(p) for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        ga = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("function non-finite at a perturbed point")
            num = (fp - fm) / (2 * eps)
            worst = max(worst, abs(ga[i] - num) / max(1.0, abs(num)))
    return worst
