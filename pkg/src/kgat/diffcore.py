"""A small reverse-mode differentiation tape over dense numpy arrays.

Only the operations the model needs are provided.  Every primitive takes
:class:`Var` operands (plain arrays are promoted to constants), computes its
value eagerly and, when the tape is recording, pushes a closure that maps the
output cotangent to input cotangents.  ``Tape(record=False)`` gives a
forward-only evaluation path through exactly the same code.

Example::

    store = ParameterStore()
    store.add("E", np.ones((5, 3)))
    tape = Tape()
    loss = sum_(gather_rows(tape.param(store, "E"), np.array([3])))
    tape.backward(loss, store)
    store.grad["E"]          # ones on row 3, zeros elsewhere
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class NonFiniteError(FloatingPointError):
    def __init__(self, msg, name=None):
        super().__init__(msg)
        self.name = name


class Var:
    __slots__ = ("value", "tape", "index", "param")

    def __init__(self, value, tape, index, param=None):
        self.value = value
        self.tape = tape
        self.index = index
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" param={self.param}" if self.param else ""
        return f"Var(shape={self.value.shape}{tag})"


class Tape:
    def __init__(self, record: bool = True):
        self.record = record
        self.records: list[tuple[Var, tuple, object]] = []
        self._n = 0
        self._params: dict[str, Var] = {}
        self.consumed = False

    def _new(self, value, param=None) -> Var:
        v = Var(value, self, self._n, param)
        self._n += 1
        return v

    def const(self, value) -> Var:
        return self._new(np.asarray(value))

    def param(self, store: "ParameterStore", name: str) -> Var:
        """Leaf bound to a store parameter; the same Var is returned on repeat calls."""
        if name not in self._params:
            self._params[name] = self._new(store[name], param=name)
        return self._params[name]

    def emit(self, value, inputs, backward) -> Var:
        out = self._new(value)
        if self.record:
            if self.consumed:
                raise ContractViolation("tape already consumed by backward()")
            self.records.append((out, inputs, backward))
        return out

    def backward(self, loss: Var, store: "ParameterStore | None" = None) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(param) into ``store.grad`` and return the per-param grads.

        Records are visited in exact reverse order of recording.
        """
        if loss.tape is not self:
            raise ContractViolation("loss was not produced on this tape")
        if loss.value.size != 1 or loss.value.ndim != 0:
            raise ContractViolation(f"loss must be a scalar, got shape {loss.value.shape}")
        if not self.record or self.consumed:
            raise ContractViolation("tape is not recording or already consumed")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for out, inputs, bwd in reversed(self.records):
            g = grads.pop(out.index, None)
            if g is None:
                continue
            for x, gx in zip(inputs, bwd(g)):
                if gx is None:
                    continue
                prev = grads.get(x.index)
                grads[x.index] = gx if prev is None else prev + gx
        self.records.clear()
        self.consumed = True

        result = {}
        for name, v in self._params.items():
            g = grads.get(v.index)
            if g is None:
                g = np.zeros_like(v.value)
            result[name] = g
            if store is not None:
                store.grad[name] += g
                store.touched.add(name)
        return result


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.const(x)


def _tape(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise ContractViolation("at least one operand must be a Var")


def _same_shape(op, a, b):
    if a.value.shape != b.value.shape:
        raise ContractViolation(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


# ----------------------------------------------------------------- indexing

def gather_rows(x: Var, idx) -> Var:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractViolation("gather_rows: index must be 1-D")
    n = x.value.shape[0]

    def bwd(g):
        return (_scatter(g, idx, n),)

    return x.tape.emit(x.value[idx], (x,), bwd)


def _scatter(g, idx, n):
    out = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
    np.add.at(out, idx, g)
    return out


def scatter_add_rows(x: Var, idx, num_rows: int) -> Var:
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) != x.value.shape[0]:
        raise ContractViolation("scatter_add_rows: one index per row required")

    def bwd(g):
        return (g[idx],)

    return x.tape.emit(_scatter(x.value, idx, num_rows), (x,), bwd)


# ------------------------------------------------------------------- linear

def matmul(a: Var, b: Var, transpose_b: bool = False) -> Var:
    """``a @ b`` (or ``a @ b.T``) for 2-D operands."""
    tape = _tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    A, B = a.value, b.value
    if A.ndim != 2 or B.ndim != 2:
        raise ContractViolation("matmul: 2-D operands only")
    inner = B.shape[1] if transpose_b else B.shape[0]
    if A.shape[1] != inner:
        raise ContractViolation(f"matmul: shape mismatch {A.shape} x {B.shape}{'^T' if transpose_b else ''}")
    out = A @ B.T if transpose_b else A @ B

    def bwd(g):
        if transpose_b:
            return g @ B, g.T @ A
        return g @ B.T, A.T @ g

    return tape.emit(out, (a, b), bwd)


def matvec(mats: Var, x: Var, index=None) -> Var:
    """Row-wise matrix-vector product ``out[n] = mats[index[n]] @ x[n]``.

    ``mats`` is ``(R, k, d)`` and ``index`` selects the matrix for each row of
    ``x``; with ``index=None`` a single ``(k, d)`` matrix is applied to every row.
    Work is grouped by matrix so no ``(n, k, d)`` intermediate is formed.
    """
    tape = _tape(mats, x)
    mats, x = _lift(tape, mats), _lift(tape, x)
    M, X = mats.value, x.value
    if index is None:
        if M.ndim != 2 or X.ndim != 2 or M.shape[1] != X.shape[1]:
            raise ContractViolation(f"matvec: shape mismatch {M.shape} . {X.shape}")

        def bwd(g):
            return g.T @ X, g @ M

        return tape.emit(X @ M.T, (mats, x), bwd)

    index = np.asarray(index, dtype=np.int64)
    if M.ndim != 3 or X.ndim != 2 or M.shape[2] != X.shape[1] or len(index) != len(X):
        raise ContractViolation(f"matvec: shape mismatch {M.shape} . {X.shape} with {index.shape} index")
    groups = _groups(index)
    out = np.empty((len(X), M.shape[1]), dtype=np.result_type(M, X))
    for r, rows in groups:
        out[rows] = X[rows] @ M[r].T

    def bwd(g):
        gM = np.zeros_like(M)
        gX = np.empty_like(X)
        for r, rows in groups:
            gM[r] = g[rows].T @ X[rows]
            gX[rows] = g[rows] @ M[r]
        return gM, gX

    return tape.emit(out, (mats, x), bwd)


def _groups(index):
    order = np.argsort(index, kind="stable")
    keys, starts = np.unique(index[order], return_index=True)
    bounds = list(starts[1:]) + [len(order)]
    return [(int(k), order[s:e]) for k, s, e in zip(keys, starts, bounds)]


# -------------------------------------------------------------- elementwise

def add(a, b) -> Var:
    tape = _tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _same_shape("add", a, b)
    return tape.emit(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Var:
    tape = _tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _same_shape("sub", a, b)
    return tape.emit(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Var:
    tape = _tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _same_shape("mul", a, b)
    A, B = a.value, b.value
    return tape.emit(A * B, (a, b), lambda g: (g * B, g * A))


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return x.tape.emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty(z.shape, dtype=z.dtype if z.dtype.kind == "f" else np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Var) -> Var:
    y = _sigmoid(np.asarray(x.value))
    return x.tape.emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def log_sigmoid(x: Var) -> Var:
    """``ln(sigmoid(x))`` evaluated without underflow for large negative x."""
    z = np.asarray(x.value)
    y = -np.logaddexp(0.0, -z)
    s = _sigmoid(z)
    return x.tape.emit(y, (x,), lambda g: (g * (1.0 - s),))


def leaky_relu(x: Var, slope: float = 0.2) -> Var:
    z = x.value
    neg = z < 0
    y = np.where(neg, slope * z, z)
    return x.tape.emit(y, (x,), lambda g: (np.where(neg, slope * g, g),))


# ----------------------------------------------------------------- segments

def _segment_reduce(ufunc, vals, offsets, fill):
    """Per-segment reduction along axis 0; empty segments get ``fill``."""
    n = len(offsets) - 1
    out = np.full((n,) + vals.shape[1:], fill, dtype=vals.dtype)
    nonempty = offsets[1:] > offsets[:-1]
    if nonempty.any():
        out[nonempty] = ufunc.reduceat(vals, offsets[:-1][nonempty], axis=0)
    return out


def _segment_ids(offsets):
    return np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))


def _check_offsets(offsets, n):
    offsets = np.asarray(offsets, dtype=np.int64)
    if offsets.ndim != 1 or len(offsets) < 1 or offsets[0] != 0 or offsets[-1] != n:
        raise ContractViolation("segment offsets must start at 0 and end at the value count")
    if np.any(np.diff(offsets) < 0):
        raise ContractViolation("segment offsets must be nondecreasing")
    return offsets


def segment_softmax(x: Var, offsets) -> Var:
    """Softmax of a flat vector within each ``[offsets[s], offsets[s+1])`` slice."""
    z = x.value
    if z.ndim != 1:
        raise ContractViolation("segment_softmax: 1-D values only")
    offsets = _check_offsets(offsets, len(z))
    if len(z) == 0:
        return x.tape.emit(z.copy(), (x,), lambda g: (g,))
    seg = _segment_ids(offsets)
    m = _segment_reduce(np.maximum, z, offsets, 0.0)
    e = np.exp(z - m[seg])
    y = e / _segment_reduce(np.add, e, offsets, 1.0)[seg]

    def bwd(g):
        dot = _segment_reduce(np.add, g * y, offsets, 0.0)
        return (y * (g - dot[seg]),)

    return x.tape.emit(y, (x,), bwd)


def segment_weighted_sum(weights: Var, values: Var, offsets) -> Var:
    """``out[s] = sum_{e in segment s} weights[e] * values[e]``; empty segments give 0."""
    tape = _tape(weights, values)
    weights, values = _lift(tape, weights), _lift(tape, values)
    w, V = weights.value, values.value
    if w.ndim != 1 or V.ndim != 2 or len(w) != len(V):
        raise ContractViolation(f"segment_weighted_sum: shape mismatch {w.shape} vs {V.shape}")
    offsets = _check_offsets(offsets, len(w))
    seg = _segment_ids(offsets)
    out = _segment_reduce(np.add, w[:, None] * V, offsets, 0.0)

    def bwd(g):
        ge = g[seg]
        return np.einsum("ij,ij->i", ge, V), w[:, None] * ge

    return tape.emit(out, (weights, values), bwd)


# ------------------------------------------------------------------ shaping

def concat(xs, axis: int = 1) -> Var:
    tape = _tape(*xs)
    xs = [_lift(tape, x) for x in xs]
    sizes = [x.value.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.value for x in xs], axis=axis)
    return tape.emit(out, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=axis)))


# --------------------------------------------------------------- reductions

def row_dot(a, b) -> Var:
    tape = _tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _same_shape("row_dot", a, b)
    A, B = a.value, b.value
    if A.ndim != 2:
        raise ContractViolation("row_dot: 2-D operands only")
    out = np.einsum("ij,ij->i", A, B)
    return tape.emit(out, (a, b), lambda g: (g[:, None] * B, g[:, None] * A))


def squared_l2(x: Var) -> Var:
    """Sum of squares of every entry, as a scalar."""
    X = x.value
    return x.tape.emit(np.asarray(np.sum(X * X)), (x,), lambda g: (2.0 * g * X,))


def ln(x: Var) -> Var:
    X = x.value
    return x.tape.emit(np.log(X), (x,), lambda g: (g / X,))


def neg(x: Var) -> Var:
    return x.tape.emit(-x.value, (x,), lambda g: (-g,))


def sum_(x: Var) -> Var:
    X = x.value
    return x.tape.emit(np.asarray(X.sum()), (x,), lambda g: (np.broadcast_to(g, X.shape).copy(),))


def scale(x: Var, c: float) -> Var:
    return x.tape.emit(x.value * c, (x,), lambda g: (g * c,))


def mean(x: Var) -> Var:
    n = x.value.size
    if n == 0:
        raise ContractViolation("mean of an empty array")
    return scale(sum_(x), 1.0 / n)


# ---------------------------------------------------------- parameter store

class ParameterStore:
    """Named parameter arrays with gradient buffers and Adam state."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.grad: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}
        self.touched: set[str] = set()

    def add(self, name: str, value) -> np.ndarray:
        value = np.array(value, dtype=self.dtype)
        self.params[name] = value
        self.grad[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        self.steps[name] = 0
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grad.values():
            g.fill(0.0)
        self.touched.clear()

    def copy(self) -> "ParameterStore":
        new = ParameterStore(self.dtype)
        for k in self.params:
            new.add(k, self.params[k])
            new.m[k] = self.m[k].copy()
            new.v[k] = self.v[k].copy()
            new.steps[k] = self.steps[k]
        return new

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def adam_step(store: ParameterStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, names=None) -> None:
    """One bias-corrected Adam update on the parameters touched by the last backward.

    Gradients are left in place; the caller zeroes them.
    """
    if names is None:
        names = [n for n in store.params if n in store.touched] if store.touched else []
    for name in names:
        g = store.grad[name]
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(f"non-finite gradient in parameter {name!r} ({bad} entries)", name)
    for name in names:
        g = store.grad[name]
        m, v = store.m[name], store.v[name]
        store.steps[name] += 1
        t = store.steps[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        store.params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)


# --------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"KGATCKPT"
CKPT_VERSION = 1


def save_checkpoint(store: ParameterStore, path, meta: dict | None = None) -> None:
    """Write parameters as ``magic | u32 version | u64 header length | JSON header | f64 payloads``.

    Payloads are row-major little-endian float64 in header order.
    """
    entries, offset = [], 0
    for name, p in store.params.items():
        nbytes = int(p.size) * 8
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = json.dumps({"params": entries, "meta": meta or {}}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(header)))
        fh.write(header)
        for p in store.params.values():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def read_checkpoint_header(path) -> tuple[int, dict, int]:
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ContractViolation(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != CKPT_VERSION:
            raise ContractViolation(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
    return version, header, len(CKPT_MAGIC) + 12 + hlen


def load_checkpoint(path, dtype=np.float64) -> tuple[ParameterStore, dict]:
    _, header, start = read_checkpoint_header(path)
    data = Path(path).read_bytes()[start:]
    store = ParameterStore(dtype)
    for e in header["params"]:
        chunk = data[e["offset"]: e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ContractViolation(f"{path}: truncated payload for {e['name']}")
        store.add(e["name"], np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]))
    return store, header["meta"]
