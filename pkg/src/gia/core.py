"""Dense matrices with tape-based reverse-mode differentiation.

Only the handful of operations the models need are supported. Every op
takes :class:`Matrix` inputs and returns a new :class:`Matrix`; if any input
is attached to a :class:`Tape`, the op is recorded there together with a
hand-written backward rule.

    tape = Tape()
    w = tape.watch("w", np.ones((2, 2)))
    loss = sum_all(matmul(x, w))
    grads = backward(tape, loss)      # {"w": ndarray}

Backward releases each recorded node (and the arrays its rule captured) as
soon as it has been processed, so peak memory during the reverse sweep stays
close to the forward footprint.
"""
from __future__ import annotations

import itertools
import math
import weakref
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ShapeError, ValidationError

__all__ = [
    "Matrix", "Tape", "SparseOperator", "AllocationTracker",
    "matmul", "add", "scale", "mul", "transpose", "relu", "sum_all",
    "softmax_rows", "spmm", "cross_entropy", "backward",
]

_uid = itertools.count()
_trackers: list["AllocationTracker"] = []


class AllocationTracker:
    """Counts Matrix elements allocated while active.

    ``live`` is the number of tracked elements still referenced, ``peak`` its
    maximum since the tracker was entered, ``total`` the cumulative count.
    Only arrays that own their memory are counted, so views are free.
    """

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.total = 0

    def _alloc(self, n):
        self.live += n
        self.total += n
        if self.live > self.peak:
            self.peak = self.live

    def _free(self, n):
        self.live -= n

    def __enter__(self):
        _trackers.append(self)
        return self

    def __exit__(self, *exc):
        _trackers.remove(self)
        return False


def _track(arr: np.ndarray) -> np.ndarray:
    if _trackers and arr.base is None and arr.size:
        for t in _trackers:
            t._alloc(arr.size)
            weakref.finalize(arr, t._free, arr.size)
    return arr


class Matrix:
    """Immutable dense 2-D float64 array, optionally attached to a tape."""

    __slots__ = ("data", "uid", "tape", "__weakref__")

    def __init__(self, data, copy: bool = True):
        arr = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"Matrix needs a 2-D array, got shape {arr.shape}")
        # wrapping an existing array without copying allocates nothing
        self.data = _track(arr) if arr is not data else arr
        self.uid = next(_uid)
        self.tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape: Optional["Tape"] = None) -> "Matrix":
        m = object.__new__(cls)
        m.data = _track(arr)
        m.uid = next(_uid)
        m.tape = tape
        return m

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls._wrap(np.zeros((rows, cols)))

    @classmethod
    def eye(cls, n: int) -> "Matrix":
        return cls._wrap(np.eye(n))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def T(self) -> "Matrix":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        tag = " tracked" if self.tape is not None else ""
        return f"Matrix({self.rows}x{self.cols}{tag})"


@dataclass
class _Node:
    out: int
    parents: tuple
    rule: Optional[Callable]


@dataclass
class Tape:
    """Records operations for one backward pass.

    A tape is single-use: :func:`backward` consumes it.
    """

    nodes: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    shapes: dict = field(default_factory=dict)
    consumed: bool = False

    def watch(self, name: str, value) -> Matrix:
        """Register ``value`` as a named parameter leaf and return it."""
        if name in self.params.values():
            raise ValueError(f"parameter {name!r} already watched")
        arr = value.data if isinstance(value, Matrix) else np.asarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"parameter {name!r} must be 2-D, got shape {arr.shape}")
        leaf = object.__new__(Matrix)
        leaf.data = arr
        leaf.uid = next(_uid)
        leaf.tape = self
        self.params[leaf.uid] = name
        self.shapes[leaf.uid] = arr.shape
        return leaf


def _record(arr: np.ndarray, parents: Sequence[Matrix], rule: Callable) -> Matrix:
    tape = None
    for p in parents:
        if p.tape is not None:
            tape = p.tape
            break
    out = Matrix._wrap(arr, tape)
    if tape is not None:
        if tape.consumed:
            raise ValueError("tape has already been used for a backward pass")
        ids = tuple(p.uid if p.tape is tape else None for p in parents)
        tape.nodes.append(_Node(out.uid, ids, rule))
    return out


def _shape_str(m: Matrix) -> str:
    return f"{m.rows}x{m.cols}"


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: cannot multiply {_shape_str(a)} by {_shape_str(b)}")
    ad, bd = a.data, b.data

    def rule(g, need):
        return (g @ bd.T if need[0] else None, ad.T @ g if need[1] else None)

    return _record(ad @ bd, (a, b), rule)


def add(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise sum; ``b`` may also be a 1 x cols row broadcast over rows."""
    if a.shape == b.shape:
        def rule(g, need):
            return g, g
    elif b.rows == 1 and b.cols == a.cols:
        def rule(g, need):
            return g, (g.sum(axis=0, keepdims=True) if need[1] else None)
    else:
        raise ShapeError(f"add: incompatible shapes {_shape_str(a)} and {_shape_str(b)}")
    return _record(a.data + b.data, (a, b), rule)


def scale(a: Matrix, c: float) -> Matrix:
    c = float(c)

    def rule(g, need):
        return (g * c,)

    return _record(a.data * c, (a,), rule)


def mul(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {_shape_str(a)} and {_shape_str(b)}")
    ad, bd = a.data, b.data

    def rule(g, need):
        return (g * bd if need[0] else None, g * ad if need[1] else None)

    return _record(ad * bd, (a, b), rule)


def transpose(a: Matrix) -> Matrix:
    def rule(g, need):
        return (g.T,)

    return _record(a.data.T, (a,), rule)


def relu(a: Matrix) -> Matrix:
    mask = a.data > 0

    def rule(g, need):
        return (g * mask,)

    return _record(np.where(mask, a.data, 0.0), (a,), rule)


def sum_all(a: Matrix) -> Matrix:
    shape = a.shape

    def rule(g, need):
        # materialised: stride-0 views push downstream matmuls off the BLAS path
        return (np.full(shape, g[0, 0]),)

    return _record(np.array([[a.data.sum()]]), (a,), rule)


def softmax_rows(m: Matrix, temperature_divisor: float = 1.0) -> Matrix:
    """Row-wise softmax of ``m / temperature_divisor``."""
    div = float(temperature_divisor)
    if not div > 0 or not math.isfinite(div):
        raise ValueError(f"temperature_divisor must be positive, got {temperature_divisor}")
    out = m.data / div
    out -= out.max(axis=1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=1, keepdims=True)

    def rule(g, need):
        tmp = g * out
        rs = tmp.sum(axis=1, keepdims=True)
        np.subtract(g, rs, out=tmp)
        tmp *= out
        tmp /= div
        return (tmp,)

    return _record(out, (m,), rule)


class SparseOperator:
    """Fixed sparse N x N operator stored as an edge list.

    ``coef[k]`` is the weight of the message from ``src[k]`` into ``dst[k]``.
    """

    def __init__(self, n: int, dst, src, coef):
        self.n = int(n)
        self.dst = np.asarray(dst, dtype=np.int64)
        self.src = np.asarray(src, dtype=np.int64)
        self.coef = np.asarray(coef, dtype=np.float64)
        self._csr = sp.csr_matrix((self.coef, (self.dst, self.src)), shape=(self.n, self.n))
        self._csr_t = self._csr.T.tocsr()

    @property
    def nnz(self) -> int:
        return len(self.coef)

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def apply(self, h: np.ndarray) -> np.ndarray:
        return np.asarray(self._csr @ h)

    def apply_transpose(self, h: np.ndarray) -> np.ndarray:
        return np.asarray(self._csr_t @ h)


def spmm(op: SparseOperator, h: Matrix) -> Matrix:
    """Gather-scatter product ``op @ h``."""
    if op.n != h.rows:
        raise ShapeError(f"spmm: operator is {op.n}x{op.n}, features are {_shape_str(h)}")

    def rule(g, need):
        return (op.apply_transpose(g),)

    return _record(op.apply(h.data), (h,), rule)


def cross_entropy(logits: Matrix, labels, weights=None, index=None) -> Matrix:
    """Mean over the selected rows of ``w[y] * -log softmax(logits)[y]``.

    ``index`` selects the rows that enter the loss (all rows if omitted);
    ``labels`` is indexed the same way as ``logits``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} logit rows but {labels.shape[0]} labels")
    idx = np.arange(n) if index is None else np.asarray(index, dtype=np.int64)
    if len(idx) == 0:
        raise ValueError("cross_entropy: empty selection")
    y = labels[idx]
    if y.min() < 0 or y.max() >= c:
        raise ValidationError(f"cross_entropy: labels must lie in [0, {c})")
    w = np.ones(c) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (c,) or np.any(w <= 0):
        raise ValueError("cross_entropy: need one positive weight per class")

    z = logits.data[idx]
    z = z - z.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(idx))
    wy = w[y]
    loss = float(np.mean(wy * (logz - z[rows, y])))

    def rule(g, need):
        p = np.exp(z - logz[:, None])
        p[rows, y] -= 1.0
        p *= (wy * (g[0, 0] / len(idx)))[:, None]
        full = np.zeros((n, c))
        np.add.at(full, idx, p)
        return (full,)

    return _record(np.array([[loss]]), (logits,), rule)


def backward(tape: Tape, loss: Matrix) -> dict:
    """Gradients of the scalar ``loss`` for every parameter watched on ``tape``.

    Returns ``{name: ndarray}``; parameters the loss does not depend on get
    zero gradients. The tape is consumed.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {_shape_str(loss)}")
    if tape.consumed:
        raise ValueError("tape has already been used for a backward pass")
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    tape.consumed = True

    grads = {loss.uid: np.ones((1, 1))}
    owned = set()
    nodes = tape.nodes
    while nodes:
        node = nodes.pop()
        rule, node.rule = node.rule, None
        g = grads.pop(node.out, None)
        owned.discard(node.out)
        if g is None:
            continue
        need = tuple(p is not None for p in node.parents)
        parts = rule(g, need)
        del g, rule
        for uid, part in zip(node.parents, parts):
            if uid is None or part is None:
                continue
            _track(part)
            prev = grads.get(uid)
            if prev is None:
                grads[uid] = part
            elif uid in owned:
                prev += part
            else:
                grads[uid] = _track(prev + part)
                owned.add(uid)
        part = parts = None

    out = {}
    for uid, name in tape.params.items():
        g = grads.get(uid)
        if g is None:
            g = np.zeros(tape.shapes[uid])
        elif g.base is not None or not g.flags.writeable:
            g = np.array(g)
        out[name] = g
    return out
