"""Dense float64 tensors with a reverse-mode gradient tape.

Design notes:

* Storage is always a contiguous row-major float64 ndarray. The model works
  on small matrices (d <= 1024, a few dozen rows/columns), so there is no
  need for views, strides, or lower precision.
* Binary elementwise ops require identical shapes. Nothing broadcasts
  implicitly; the only sanctioned expansion is the column-wise bias add
  inside :func:`linear`.
* A :class:`Tape` records every op executed while it is active (per thread).
  ``backward`` replays the record list once, in reverse, summing gradients
  into tensors that are consumed by several ops (needed for residual
  connections and shared encoder outputs).
* Reductions that aggregate over an unordered set of items (softmax
  normalization, attention-weighted mixing) go through canonical sorted
  summation, so permuting the aggregated items reproduces bit-identical
  results. See :func:`matmul_canonical`.
"""

from __future__ import annotations

import math
import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TensorError",
    "ShapeError",
    "DegenerateRowError",
    "TapeError",
    "backward",
    "grad_check",
    "matmul",
    "matmul_canonical",
    "transpose",
    "reshape",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "sigmoid",
    "tanh",
    "relu",
    "pointwise",
    "linear",
    "scaled_softmax",
    "sum_all",
    "log",
    "sqrt",
    "clamp",
    "concat_rows",
    "concat_cols",
    "gather_columns",
    "stack2d",
    "entry",
]

# Sigmoid outputs are clipped into the open interval so that downstream
# log(score) and log(1 - score) stay finite even for saturated logits.
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)

# Additive surrogate for -inf when masking softmax logits.
_MASK_NEG = 1e30


class TensorError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(TensorError):
    """Operands have incompatible shapes."""


class DegenerateRowError(TensorError):
    """A softmax row has no unmasked entries."""


class TapeError(TensorError):
    """Backward pass invoked on an invalid loss/tape combination."""


class Tensor:
    """Dense n-dimensional float64 array, optionally tracked for gradients.

    ``grad`` is populated by :func:`backward` for every ``requires_grad``
    tensor reachable from the loss. Tensors are treated as immutable once
    created; only the optimizer rebinds parameter data between tapes.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # note: would promote 0-d, but 0-d is always contiguous
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return self.data.item()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = []
        _LOCAL.tapes = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of ops, replayed in reverse by :func:`backward`.

    One tape per forward pass; tapes are thread-local and single-owner.
    """

    __slots__ = ("_records", "_tracked", "_seen")

    def __init__(self):
        self._records: list = []  # (out, inputs, backfn)
        self._tracked: set[int] = set()  # outputs with gradient lineage
        self._seen: set[int] = set()  # every output produced under this tape

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _tape_stack().pop()
        if popped is not self:
            raise TapeError("tapes exited out of order")
        return False

    def __len__(self) -> int:
        return len(self._records)


def _record(out: Tensor, inputs: tuple, backfn) -> Tensor:
    tape = active_tape()
    if tape is None:
        return out
    tape._seen.add(id(out))
    tracked = tape._tracked
    for t in inputs:
        if t.requires_grad or id(t) in tracked:
            tracked.add(id(out))
            tape._records.append((out, inputs, backfn))
            break
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` ancestor of ``loss``.

    The gradient of the loss with respect to itself is 1. Tensors consumed
    by several ops accumulate the sum of their incoming gradients. A loss
    with no gradient lineage writes nothing.
    """
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tape._seen and not loss.requires_grad:
        if tape._records:
            raise TapeError("loss tensor was not produced under this tape")
        return

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, backfn in reversed(tape._records):
        g = grads.get(id(out))
        if g is None:
            continue
        for t, gi in zip(inputs, backfn(g)):
            if gi is None:
                continue
            key = id(t)
            prev = grads.get(key)
            # never mutate stored arrays: they may be shared by reference
            grads[key] = gi if prev is None else prev + gi
            holders[key] = t
    for key, t in holders.items():
        if t.requires_grad:
            t.grad = grads[key]


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def _require_2d(name: str, *ts: Tensor) -> None:
    for t in ts:
        if t.data.ndim != 2:
            raise ShapeError(f"{name}: expected 2-d operand, got shape {t.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product of two 2-d tensors."""
    _require_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = Tensor(ad @ bd)
    return _record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def matmul_canonical(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product whose contraction sums in sorted order.

    The result depends only on the multiset of products per output cell, so
    permuting the contracted axis (e.g. reordering the items an attention
    row aggregates over) gives bit-identical output. Quadratic/cubic memory
    in the operand sizes; reserve for small aggregation mixes.
    """
    _require_2d("matmul_canonical", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul_canonical: inner dimensions disagree, {a.shape} x {b.shape}"
        )
    ad, bd = a.data, b.data
    prod = ad[:, :, None] * bd[None, :, :]  # (m, k, n)
    prod.sort(axis=1)
    out = Tensor(prod.sum(axis=1))
    return _record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def _sorted_rowsum(x: np.ndarray) -> np.ndarray:
    """Row sums over a canonical (sorted) ordering; permutation-invariant."""
    s = np.sort(x, axis=1)
    return s.sum(axis=1, keepdims=True)


def transpose(a: Tensor) -> Tensor:
    _require_2d("transpose", a)
    out = Tensor(a.data.T)
    return _record(out, (a,), lambda g: (np.ascontiguousarray(g.T),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = Tensor(a.data.reshape(shape))
    src = a.shape
    return _record(out, (a,), lambda g: (g.reshape(src),))


def _binary(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes differ, {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary("add", a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary("sub", a, b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary("mul", a, b)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)
    return _record(out, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary("div", a, b)
    ad, bd = a.data, b.data
    out = Tensor(ad / bd)
    return _record(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + c)
    return _record(out, (a,), lambda g: (g,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    nonneg = x >= 0
    z = np.exp(np.where(nonneg, -x, x))  # exp of a non-positive value
    y = np.where(nonneg, 1.0 / (1.0 + z), z / (1.0 + z))
    y = np.clip(y, _SIG_LO, _SIG_HI)  # keep strictly inside (0, 1)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    out = Tensor(np.maximum(x, 0.0))
    return _record(out, (a,), lambda g: (g * (x > 0.0),))


_POINTWISE_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_POINTWISE_BINARY = {"add": add, "mul": mul}


def pointwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch an elementwise op by name: sigmoid/tanh/relu/add/mul."""
    if kind in _POINTWISE_UNARY:
        if b is not None:
            raise ShapeError(f"pointwise {kind!r} is unary")
        return _POINTWISE_UNARY[kind](a)
    if kind in _POINTWISE_BINARY:
        if b is None:
            raise ShapeError(f"pointwise {kind!r} needs two operands")
        return _POINTWISE_BINARY[kind](a, b)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``w @ x + b`` with the bias added to every column."""
    _require_2d("linear", x, w)
    if b.data.ndim != 1:
        raise ShapeError(f"linear: bias must be 1-d, got shape {b.shape}")
    if w.shape[1] != x.shape[0] or w.shape[0] != b.shape[0]:
        raise ShapeError(
            f"linear: incompatible shapes w={w.shape}, x={x.shape}, b={b.shape}"
        )
    xd, wd = x.data, w.data
    out = Tensor(wd @ xd + b.data[:, None])
    return _record(out, (x, w, b), lambda g: (wd.T @ g, g @ xd.T, g.sum(axis=1)))


def scaled_softmax(m: Tensor, scale_div: float, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax of ``m / scale_div`` with optional boolean masking.

    Masked-out positions get exactly zero weight; every row of the output
    sums to one. Masking is applied as a large negative additive surrogate
    before the max-subtraction, then the masked exponentials are zeroed
    outright before normalization.
    """
    _require_2d("scaled_softmax", m)
    if not scale_div > 0:
        raise ValueError(f"scaled_softmax: scale must be positive, got {scale_div}")
    z = m.data / scale_div
    keep = None
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != m.shape:
            raise ShapeError(
                f"scaled_softmax: mask shape {keep.shape} != input shape {m.shape}"
            )
        dead = ~keep.any(axis=1)
        if dead.any():
            raise DegenerateRowError(
                f"scaled_softmax: rows {np.flatnonzero(dead).tolist()} are fully masked"
            )
        z = z - (~keep) * _MASK_NEG
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    if keep is not None:
        e = e * keep
    y = e / _sorted_rowsum(e)
    out = Tensor(y)

    def backfn(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - inner) / scale_div,)

    return _record(out, (m,), backfn)


def sum_all(a: Tensor) -> Tensor:
    """Sum of every element, as a 0-d tensor."""
    shp = a.shape
    out = Tensor(a.data.sum())
    return _record(out, (a,), lambda g: (np.full(shp, float(g)),))


def log(a: Tensor) -> Tensor:
    x = a.data
    out = Tensor(np.log(x))
    return _record(out, (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g / (2.0 * y),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient passes only through unclipped entries."""
    x = a.data
    out = Tensor(np.clip(x, lo, hi))
    inside = (x >= lo) & (x <= hi)
    return _record(out, (a,), lambda g: (g * inside,))


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    _require_2d("concat_rows", a, b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows: column counts differ, {a.shape} vs {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=0))
    na = a.shape[0]
    return _record(out, (a, b), lambda g: (g[:na], g[na:]))


def concat_cols(tensors: list[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_cols: empty input")
    _require_2d("concat_cols", *tensors)
    rows = tensors[0].shape[0]
    for t in tensors:
        if t.shape[0] != rows:
            raise ShapeError("concat_cols: row counts differ")
    widths = [t.shape[1] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1))
    offsets = np.cumsum([0] + widths)

    def backfn(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(widths)))

    return _record(out, tuple(tensors), backfn)


def gather_columns(table: Tensor, ids) -> Tensor:
    """Select columns ``table[:, ids]``; gradients scatter-add back."""
    _require_2d("gather_columns", table)
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_columns: ids must be 1-d, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[1]):
        raise IndexError(
            f"gather_columns: id out of range for table with {table.shape[1]} columns"
        )
    out = Tensor(table.data[:, idx])
    shp = table.shape

    def backfn(g):
        gt = np.zeros(shp)
        np.add.at(gt, (slice(None), idx), g)
        return (gt,)

    return _record(out, (table,), backfn)


def stack2d(grid: list[list[Tensor]]) -> Tensor:
    """Assemble a matrix from a grid of scalar tensors."""
    nrows = len(grid)
    ncols = len(grid[0]) if nrows else 0
    flat: list[Tensor] = []
    for row in grid:
        if len(row) != ncols:
            raise ShapeError("stack2d: ragged grid")
        flat.extend(row)
    for t in flat:
        if t.data.size != 1:
            raise ShapeError(f"stack2d: entries must be scalar, got shape {t.shape}")
    out = Tensor(np.array([[t.item() for t in row] for row in grid]))

    def backfn(g):
        return tuple(np.asarray(g[i, j]) for i in range(nrows) for j in range(ncols))

    return _record(out, tuple(flat), backfn)


def entry(a: Tensor, i: int, j: int) -> Tensor:
    """Pick a single matrix entry as a 0-d tensor."""
    _require_2d("entry", a)
    out = Tensor(a.data[i, j])
    shp = a.shape

    def backfn(g):
        ga = np.zeros(shp)
        ga[i, j] = float(g)
        return (ga,)

    return _record(out, (a,), backfn)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def grad_check(f, inputs, eps: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` must be a deterministic function mapping tensors to a scalar
    tensor. Every input coordinate is perturbed by +-eps. Reports the error;
    never raises on a mismatch.
    """
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = f(*tensors)
    backward(tape, out)

    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        aflat = analytic.reshape(-1)
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = f(*tensors).item()
            flat[k] = orig - eps
            dn = f(*tensors).item()
            flat[k] = orig
            numeric = (up - dn) / (2.0 * eps)
            denom = max(abs(aflat[k]), abs(numeric))
            err = abs(aflat[k] - numeric)
            if denom > 1e-8:
                err /= denom
            worst = max(worst, err)
    return worst


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def sqrt_scale(d: int) -> float:
    """Softmax temperature used by the attention blocks."""
    return math.sqrt(d)
