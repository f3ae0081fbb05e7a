"""Minimal define-by-run reverse-mode automatic differentiation.

Every forward pass records onto a fresh :class:`Tape`. Operations are plain
module-level functions over :class:`Tensor`; a tensor that was not produced
on a tape is a constant and receives no gradient.

    tape = Tape()
    w = tape.param("w", np.array([[2.0]]))
    loss = reduce_sum(matmul(w, x))
    grads = tape.backward(loss)     # {"w": ndarray}
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

EPS_NORM = 1e-12

# working dtype of tensor data; grad_check switches it to extended precision
_working_dtype = [np.float64]


@contextlib.contextmanager
def working_precision(dtype):
    """Temporarily compute with ``dtype`` (e.g. ``np.longdouble``) instead of float64."""
    _working_dtype.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _working_dtype.pop()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class EmptyNeighborhoodError(ValueError):
    """A set pooling was asked to reduce zero members."""


class Tensor:
    """Immutable dense array (float64 unless overridden), optionally attached to a tape node."""

    __slots__ = ("data", "tape", "index")

    def __init__(self, data, tape: Optional["Tape"] = None, index: Optional[int] = None,
                 _owned: bool = False):
        arr = data if _owned else np.array(data, dtype=_working_dtype[-1])
        arr.setflags(write=False)
        self.data = arr
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        where = "const" if self.tape is None else f"node {self.index}"
        return f"Tensor(shape={self.shape}, {where})"


@dataclass
class _Node:
    op: str
    inputs: tuple[Optional[int], ...]
    vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    name: Optional[str] = None


class Tape:
    """Append-only record of operations for one forward pass.

    With ``record=False`` the tape only serves parameters as constants, which
    makes evaluation-mode forwards cheap.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[_Node] = []
        self._params: dict[str, Tensor] = {}

    def param(self, name: str, value) -> Tensor:
        """Register (once) and return the leaf tensor for parameter ``name``."""
        t = self._params.get(name)
        if t is None:
            if self.record:
                t = Tensor(value, self, len(self.nodes))
                self.nodes.append(_Node("param", (), None, name))
            else:
                t = Tensor(value)
            self._params[name] = t
        return t

    @property
    def param_names(self) -> list[str]:
        return list(self._params)

    def _push(self, op, inputs, out, vjp) -> Tensor:
        t = Tensor(out, self, len(self.nodes), _owned=True)
        self.nodes.append(_Node(op, inputs, vjp))
        return t

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for every parameter touched on this tape."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        grads: list[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.data)
        for i in range(len(self.nodes) - 1, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for src, gi in zip(node.inputs, node.vjp(g)):
                if src is None or gi is None:
                    continue
                # accumulate out of place: vjps may hand back shared arrays
                grads[src] = gi if grads[src] is None else grads[src] + gi
        out = {}
        for name, t in self._params.items():
            g = grads[t.index] if t.index is not None else None
            out[name] = np.zeros_like(t.data) if g is None else np.array(g, dtype=np.float64)
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is not None and t.tape.record:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = t.tape
    return tape


def _op(name: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    tape = _tape_of(*inputs)
    out = np.asarray(out, dtype=_working_dtype[-1])
    if out.base is not None or not out.flags.owndata:
        out = out.copy()
    if tape is None:
        return Tensor(out, _owned=True)
    return tape._push(name, tuple(t.index if t.tape is tape else None for t in inputs), out, vjp)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product for rank-2 @ rank-2, rank-2 @ rank-1 or rank-1 @ rank-2."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or (a.ndim == 1 and b.ndim == 1):
        raise DimensionError(f"matmul: unsupported ranks {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if B.ndim == 1:
            return np.outer(g, B), A.T @ g
        return B @ g, np.outer(A, g)

    return _op("matmul", (a, b), A @ B, vjp)


def linear(x, w, b) -> Tensor:
    """Row-wise affine map ``x @ w.T + b`` for x (n, k), w (m, k), b (m,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or b.shape != (w.shape[0],) or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: incompatible shapes x {x.shape}, w {w.shape}, b {b.shape}")
    X, W = x.data, w.data
    return _op("linear", (x, w, b), X @ W.T + b.data,
               lambda g: (g @ W, g.T @ X, g.sum(axis=0)))


def pairwise_dot(a, b) -> Tensor:
    """``a @ b.T`` with every entry summed independently of the others.

    BLAS kernels may round a row differently depending on where it sits in
    the matrix; this form makes out[i, j] depend only on a[i] and b[j], so
    permuting rows of either operand permutes the result bit for bit.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_dot: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    out = (A[:, None, :] * B[None, :, :]).sum(axis=-1)
    return _op("pairwise_dot", (a, b), out, lambda g: (g @ B, g.T @ A))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: need rank 2, got {a.shape}")
    return _op("transpose", (a,), a.data.T, lambda g: (g.T,))


def broadcast_to(a, shape) -> Tensor:
    """Numpy-style broadcast; the backward pass sums over expanded axes."""
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    src = a.shape

    def vjp(g):
        lead = g.ndim - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(src),)

    return _op("broadcast", (a,), out, vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    return _op("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def gather_rows(table, indices) -> Tensor:
    """Row lookup ``table[indices]``; used for embedding tables."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if table.ndim != 2:
        raise DimensionError(f"gather_rows: table must be rank 2, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: index out of range for table with {table.shape[0]} rows")
    n, d = table.shape

    def vjp(g):
        full = np.zeros((n, d))
        np.add.at(full, idx, g)
        return (full,)

    return _op("gather", (table,), table.data[idx], vjp)


def concat(a, b, axis: int = -1) -> Tensor:
    """Concatenate two rank-1 vectors, or two rank-2 blocks along ``axis``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (1, 2):
        raise DimensionError(f"concat: incompatible ranks {a.shape} and {b.shape}")
    ax = axis % a.ndim
    other = [i for i in range(a.ndim) if i != ax]
    if any(a.shape[i] != b.shape[i] for i in other):
        raise DimensionError(f"concat: shapes {a.shape} and {b.shape} differ off axis {ax}")
    split = a.shape[ax]

    def vjp(g):
        ga, gb = np.split(g, [split], axis=ax)
        return ga, gb

    return _op("concat", (a, b), np.concatenate([a.data, b.data], axis=ax), vjp)


def stack(members: Sequence[Tensor]) -> Tensor:
    members = [_as_tensor(m) for m in members]
    shape = members[0].shape
    for m in members:
        if m.shape != shape:
            raise DimensionError(f"stack: shape mismatch {shape} vs {m.shape}")
    k = len(members)
    return _op("stack", members, np.stack([m.data for m in members]),
               lambda g: tuple(g[i] for i in range(k)))


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _op("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _op("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def hadamard(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("hadamard", a, b)
    A, B = a.data, b.data
    return _op("hadamard", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _op("scale", (a,), a.data * c, lambda g: (g * c,))


def shift(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _op("shift", (a,), a.data + float(c), lambda g: (g,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0, e) / (1.0 + e)
    return _op("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _op("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _op("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def log(a, floor: float = EPS_NORM) -> Tensor:
    """Natural log of ``max(a, floor)``; zero gradient where clamped. NaN passes through."""
    a = _as_tensor(a)
    x = a.data
    live = ~(x <= floor)
    safe = np.where(live, x, floor)
    return _op("log", (a,), np.log(safe), lambda g: (np.where(live, g / safe, 0.0),))


_ELEMENTWISE = {
    "add": add, "hadamard": hadamard, "sigmoid": sigmoid,
    "tanh": tanh, "relu": relu, "scale": scale,
}


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch to one of the pointwise operations by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- reductions

def reduce_sum(a, axis: Optional[int] = None) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    if axis is None:
        return _op("sum", (a,), np.asarray(a.data.sum()),
                   lambda g: (np.broadcast_to(g, src).copy(),))
    ax = axis % a.ndim

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, ax), src).copy(),)

    return _op("sum", (a,), a.data.sum(axis=ax), vjp)


def reduce_mean(a, axis: Optional[int] = None) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / n)


def index(a, i: int) -> Tensor:
    """Scalar entry ``a[i]`` of a rank-1 tensor."""
    a = _as_tensor(a)
    n = a.shape[0]

    def vjp(g):
        out = np.zeros(n)
        out[i] = g
        return (out,)

    return _op("index", (a,), np.asarray(a.data[i]), vjp)


def l2_normalize(x) -> Tensor:
    """``x / max(||x||, 1e-12)`` for a rank-1 vector."""
    x = _as_tensor(x)
    if x.ndim != 1 or x.shape[0] < 1:
        raise DimensionError(f"l2_normalize: need non-empty rank 1, got {x.shape}")
    return reshape(l2_normalize_rows(reshape(x, (1, -1))), x.shape)


def l2_normalize_rows(x) -> Tensor:
    """Row-wise :func:`l2_normalize` of a rank-2 block."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize_rows: need rank 2, got {x.shape}")
    X = x.data
    norm = np.sqrt((X * X).sum(axis=1, keepdims=True))
    clamped = norm < EPS_NORM
    denom = np.where(clamped, EPS_NORM, norm)
    out = X / denom

    def vjp(g):
        # clamped rows are a plain division by a constant
        dot = (g * out).sum(axis=1, keepdims=True)
        live = (g - out * dot) / denom
        return (np.where(clamped, g / denom, live),)

    return _op("l2norm", (x,), out, vjp)


def softmax(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 1 or x.shape[0] < 1:
        raise DimensionError(f"softmax: need non-empty rank 1, got {x.shape}")
    z = x.data - x.data.max()
    e = np.exp(z)
    out = e / e.sum()

    def vjp(g):
        return (out * (g - np.dot(g, out)),)

    return _op("softmax", (x,), out, vjp)


def _reduce_block(kind: str, block: Tensor) -> Tensor:
    V = block.data
    n = V.shape[0]
    if kind in ("sum", "mean"):
        # summing sorted values makes the result bitwise independent of member order
        w = 1.0 if kind == "sum" else 1.0 / n
        return _op(f"{kind}pool", (block,), np.sort(V, axis=0).sum(axis=0) * w,
                   lambda g: (np.broadcast_to(g * w, V.shape),))
    if kind == "max":
        arg = np.argmax(V, axis=0)  # first maximal member wins ties
        cols = np.arange(V.shape[1]) if V.ndim == 2 else None

        def vjp(g):
            out = np.zeros_like(V)
            if V.ndim == 2:
                out[arg, cols] = g
            else:
                out[arg] = g
            return (out,)

        return _op("maxpool", (block,), V.max(axis=0), vjp)
    raise ValueError(f"unknown pool kind {kind!r}")


def set_pool(kind: str, members: Sequence[Tensor]) -> Tensor:
    """Commutative reduction (mean, sum or max) over equal-shape members."""
    if len(members) == 0:
        raise EmptyNeighborhoodError(f"{kind} pool over an empty neighbourhood")
    return _reduce_block(kind, stack(members))


def segment_pool(kind: str, values, segments, n_segments: int) -> Tensor:
    """Pool rows of ``values`` grouped by ``segments`` into ``n_segments`` rows.

    Vectorized counterpart of :func:`set_pool`. Segments without members come
    out as zero rows.
    """
    values = _as_tensor(values)
    seg = np.asarray(segments, dtype=np.int64).reshape(-1)
    if values.ndim != 2 or values.shape[0] != seg.size:
        raise DimensionError(f"segment_pool: {values.shape} rows vs {seg.size} segment ids")
    V = values.data
    d = V.shape[1]
    counts = np.bincount(seg, minlength=n_segments).astype(np.float64)
    if kind == "max":
        out = np.zeros((n_segments, d))
        arg = np.full((n_segments, d), -1, dtype=np.int64)
        for s in range(n_segments):
            rows = np.flatnonzero(seg == s)
            if rows.size:
                k = np.argmax(V[rows], axis=0)
                arg[s] = rows[k]
                out[s] = V[rows[k], np.arange(d)]

        def vjp(g):
            gv = np.zeros_like(V)
            for s in range(n_segments):
                if arg[s, 0] >= 0:
                    np.add.at(gv, (arg[s], np.arange(d)), g[s])
            return (gv,)

        return _op("segmax", (values,), out, vjp)
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown pool kind {kind!r}")
    out = np.zeros((n_segments, d))
    np.add.at(out, seg, V)
    if kind == "mean":
        w = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
        out *= w[:, None]
    else:
        w = np.ones(n_segments)

    def vjp(g):
        return ((g * w[:, None])[seg],)

    return _op(f"seg{kind}", (values,), out, vjp)


# ---------------------------------------------------------------- checking

def grad_check(forward_fn: Callable[[Tape, dict], Tensor], params: dict[str, np.ndarray],
               eps: float = 1e-5, names: Optional[Sequence[str]] = None) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients.

    ``forward_fn(tape, params)`` must fetch every parameter through
    ``tape.param`` and return a scalar loss; it must be deterministic.
    The per-entry error is ``|a - n| / max(|a|, |n|, 1e-8)``. Function
    values for the differences are computed in extended precision so that
    rounding noise (about 1e-11 at eps=1e-5 in float64) does not swamp
    gradient entries near 1e-8.
    """
    tape = Tape()
    analytic = tape.backward(forward_fn(tape, params))
    wide = np.longdouble
    base = {k: np.array(v, dtype=wide) for k, v in params.items()}

    def value(p):
        with working_precision(wide):
            return forward_fn(Tape(record=False), p).data.reshape(-1)[0]

    errors = {}
    for name in names if names is not None else list(base):
        theta = base[name]
        ana = analytic.get(name, np.zeros_like(theta)).reshape(-1)
        worst = 0.0
        flat = theta.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = value(base)
            flat[k] = orig - eps
            fm = value(base)
            flat[k] = orig
            num = float((fp - fm) / (2 * wide(eps)))
            err = abs(ana[k] - num) / max(abs(ana[k]), abs(num), 1e-8)
            worst = max(worst, err)
        errors[name] = worst
    return errors
