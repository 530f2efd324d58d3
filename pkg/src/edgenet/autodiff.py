"""Tape-based reverse-mode differentiation over dense float64 arrays.

The operator set is exactly what the network and its training loss need:
matmul, elementwise add/sub/mul, bias-row addition, concatenation along the
last axis, shifted softplus, row gather, segment reduction, scalar scaling and
full summation. The tape is rebuilt on every forward pass; recording order is
topological by construction, so the backward pass just walks it in reverse.

Gradient buffers are allocated lazily: nodes that never receive an upstream
gradient keep ``grad`` None, except leaves, which are zero-filled after
``backward`` so off-path parameters read as zero gradients.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError, ShapeError

_LN2 = float(np.log(2.0))


class Tensor:
    """A node on a tape: a float64 array plus its (lazily allocated) gradient."""

    __slots__ = ("data", "grad", "tape")

    def __init__(self, data: np.ndarray, tape: "Tape"):
        self.data = data
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def _accum(t: Tensor, value: np.ndarray) -> None:
    if t.grad is None:
        # Copy: `value` may alias another node's gradient buffer.
        t.grad = np.array(value, dtype=np.float64)
    else:
        t.grad += value


class Tape:
    """Ordered record of operations; single forward, single backward.

    With ``check_finite`` every op output is verified finite and a
    :class:`NumericalError` names the first offending op.
    """

    def __init__(self, check_finite: bool = False):
        self._backops: list = []
        self._leaves: list[Tensor] = []
        self.check_finite = check_finite

    def leaf(self, array, name: str | None = None) -> Tensor:
        data = np.asarray(array, dtype=np.float64)
        if self.check_finite and not np.isfinite(data).all():
            raise NumericalError(f"non-finite leaf {name or ''}")
        t = Tensor(data, self)
        self._leaves.append(t)
        return t

    def _node(self, data: np.ndarray, backward, opname: str) -> Tensor:
        if self.check_finite and not np.isfinite(data).all():
            raise NumericalError(f"non-finite output of {opname}")
        out = Tensor(data, self)
        self._backops.append(backward(out))
        return out

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for op in reversed(self._backops):
            op()
        for leaf in self._leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def _scatter_add_rows(out: np.ndarray, ids: np.ndarray, rows: np.ndarray) -> None:
    """out[ids] += rows with repeated ids accumulated.

    Sort-and-reduceat is much faster than np.add.at and keeps a fixed
    (id-sorted) accumulation order, so results are deterministic.
    """
    if len(ids) == 0:
        return
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    starts = np.concatenate(([0], np.flatnonzero(np.diff(sorted_ids)) + 1))
    out[sorted_ids[starts]] += np.add.reduceat(rows[order], starts, axis=0)


def _same_tape(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ShapeError("operands recorded on different tapes")
    return tape


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a (1, n) bias row against an (m, n) matrix."""
    tape = _same_tape(a, b)
    if a.shape == b.shape:
        def backward(out):
            def op():
                g = out.grad
                if g is None:
                    return
                _accum(a, g)
                _accum(b, g)
            return op
    elif a.data.ndim == 2 and b.data.ndim == 2 and b.shape == (1, a.shape[1]):
        def backward(out):
            def op():
                g = out.grad
                if g is None:
                    return
                _accum(a, g)
                _accum(b, g.sum(axis=0, keepdims=True))
            return op
    elif a.data.ndim == 2 and b.data.ndim == 2 and a.shape == (1, b.shape[1]):
        def backward(out):
            def op():
                g = out.grad
                if g is None:
                    return
                _accum(a, g.sum(axis=0, keepdims=True))
                _accum(b, g)
            return op
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return tape._node(a.data + b.data, backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def backward(out):
        def op():
            g = out.grad
            if g is None:
                return
            _accum(a, g)
            _accum(b, -g)
        return op

    return tape._node(a.data - b.data, backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def backward(out):
        def op():
            g = out.grad
            if g is None:
                return
            _accum(a, g * b.data)
            _accum(b, g * a.data)
        return op

    return tape._node(a.data * b.data, backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(out):
        def op():
            g = out.grad
            if g is None:
                return
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)
        return op

    return tape._node(a.data @ b.data, backward, "matmul")


def concat(*tensors: Tensor) -> Tensor:
    """Concatenate 2D tensors along the last axis."""
    tape = _same_tape(*tensors)
    rows = tensors[0].shape[0]
    for t in tensors:
        if t.data.ndim != 2 or t.shape[0] != rows:
            raise ShapeError(
                "concat: row counts differ: " + ", ".join(str(t.shape) for t in tensors)
            )
    widths = [t.shape[1] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def backward(out):
        def op():
            g = out.grad
            if g is None:
                return
            for t, piece in zip(tensors, np.split(g, splits, axis=1)):
                _accum(t, piece)
        return op

    return tape._node(np.concatenate([t.data for t in tensors], axis=1), backward, "concat")


def shifted_softplus_array(x: np.ndarray) -> np.ndarray:
    """ln(e^x + 1) - ln 2 on a plain array (no tape)."""
    x = np.asarray(x, dtype=np.float64)
    t = np.exp(-np.abs(x))
    return np.maximum(x, 0.0) + np.log1p(t) - _LN2


def shifted_softplus(a: Tensor) -> Tensor:
    """Smooth activation with value 0 and slope 1/2 at the origin.

    The x + log1p(e^-x) form keeps large arguments exact; the gradient is the
    logistic function, sharing the same exp(-|x|) term.
    """
    x = a.data
    t = np.exp(-np.abs(x))
    value = np.maximum(x, 0.0) + np.log1p(t) - _LN2

    def backward(out):
        def op():
            g = out.grad
            if g is None:
                return
            _accum(a, g * (np.where(x >= 0.0, 1.0, t) / (1.0 + t)))
        return op

    return a.tape._node(value, backward, "shifted_softplus")


def gather_rows(table: Tensor, indices) -> Tensor:
    """Copy rows ``table[indices]``; the gradient scatter-adds back."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"gather_rows: index out of range for table with {table.shape[0]} rows"
        )

    def backward(out):
        def op():
            g = out.grad
            if g is None:
                return
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            _scatter_add_rows(table.grad, idx, g)
        return op

    return table.tape._node(table.data[idx], backward, "gather_rows")


def segment_reduce(x: Tensor, segment_ids, num_segments: int, mode: str = "sum") -> Tensor:
    """Per-segment sum or mean of rows. Empty segments sum to a zero row;
    a mean over an empty segment is an error."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    if x.data.ndim != 2 or ids.shape != (x.shape[0],):
        raise ShapeError(
            f"segment_reduce: rows {x.shape} vs segment_ids {ids.shape}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise IndexError(f"segment_reduce: segment id outside [0, {num_segments})")
    if mode not in ("sum", "mean"):
        raise ValueError(f"segment_reduce: unknown mode {mode!r}")
    counts = np.bincount(ids, minlength=num_segments).astype(np.float64)
    if mode == "mean" and np.any(counts == 0):
        empty = int(np.flatnonzero(counts == 0)[0])
        raise NumericalError(f"segment_reduce: mean over empty segment {empty}")
    summed = np.zeros((num_segments, x.shape[1]))
    _scatter_add_rows(summed, ids, x.data)
    if mode == "sum":
        def backward(out):
            def op():
                g = out.grad
                if g is None:
                    return
                _accum(x, g[ids])
            return op
        return x.tape._node(summed, backward, "segment_reduce")

    inv = 1.0 / np.maximum(counts, 1.0)

    def backward(out):
        def op():
            g = out.grad
            if g is None:
                return
            _accum(x, g[ids] * inv[ids, None])
        return op

    return x.tape._node(summed * inv[:, None], backward, "segment_reduce")


def scale(a: Tensor, factor: float) -> Tensor:
    def backward(out):
        def op():
            if out.grad is not None:
                _accum(a, out.grad * factor)
        return op

    return a.tape._node(a.data * factor, backward, "scale")


def sum_all(a: Tensor) -> Tensor:
    """Sum every entry into a 1x1 tensor."""
    def backward(out):
        def op():
            if out.grad is None:
                return
            upstream = out.grad.ravel()[0]
            if a.grad is None:
                a.grad = np.full_like(a.data, upstream)
            else:
                a.grad += upstream
        return op

    return a.tape._node(a.data.sum().reshape(1, 1), backward, "sum_all")
