"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive's backward rule is written in terms of the same primitives,
so calling :func:`grad` with ``create_graph=True`` records the gradient
computation on the tape and the result can be differentiated again. This is
what second-order MAML needs.

A :class:`Tensor` either belongs to a :class:`Tape` (it was produced by a
recorded operation) or is a free constant. Operations on free tensors only
compute values; operations touching a taped tensor are recorded on its tape.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from metadro.errors import DimensionError, GradientError, NumericError

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "Entry",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "relu",
    "exp",
    "log",
    "reciprocal",
    "reduce_sum",
    "broadcast",
    "reshape",
    "mean",
    "squared_norm",
    "l2_squared",
    "pairwise_sq_dists",
    "softmax",
    "cross_entropy",
    "softmax_cross_entropy",
    "grad",
]


class Tensor:
    """Immutable float64 array, optionally bound to a tape node."""

    __slots__ = ("value", "tape", "id")

    def __init__(self, value, tape: "Tape | None" = None, id: int = -1):
        arr = np.array(value, dtype=np.float64)
        arr.flags.writeable = False
        self.value = arr
        self.tape = tape
        self.id = id

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape=None, id=-1) -> "Tensor":
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.value = arr
        t.tape = tape
        t.id = id
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def data(self) -> np.ndarray:
        """Values in row-major order."""
        return self.value.ravel()

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.value.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.value)

    def __repr__(self) -> str:
        where = f", node={self.id}" if self.tape is not None else ""
        return f"Tensor({self.value!r}{where})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, reciprocal(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A leaf node on a tape."""

    __slots__ = ("name", "trainable")


class Entry(NamedTuple):
    op: str
    inputs: tuple[int, ...]
    output: int
    attrs: tuple


class Tape:
    """Ordered record of primitive applications.

    Node ids are positions in :attr:`entries`; every entry's inputs have
    smaller ids than its output. Node values (the saved activations) live in
    :attr:`nodes`.
    """

    def __init__(self):
        self.entries: list[Entry] = []
        self.nodes: list[Tensor] = []
        self._requires: list[bool] = []

    def __len__(self) -> int:
        return len(self.entries)

    def parameter(self, value, name: str | None = None, trainable: bool = True) -> Parameter:
        arr = np.array(value, dtype=np.float64)
        arr.flags.writeable = False
        p = Parameter._wrap(arr, self, len(self.entries))
        p.name = name
        p.trainable = trainable
        self._push(Entry("leaf", (), p.id, ()), p, trainable)
        return p

    def constant(self, value) -> Tensor:
        arr = value.value if isinstance(value, Tensor) else np.array(value, dtype=np.float64)
        t = Tensor._wrap(arr, self, len(self.entries))
        self._push(Entry("const", (), t.id, ()), t, False)
        return t

    def _push(self, entry: Entry, node: Tensor, requires: bool) -> None:
        self.entries.append(entry)
        self.nodes.append(node)
        self._requires.append(requires)

    def _record(self, op: str, inputs: Sequence[Tensor], value: np.ndarray, attrs: tuple) -> Tensor:
        ids = []
        requires = False
        for t in inputs:
            if t.tape is not self:
                t = self.constant(t)
            ids.append(t.id)
            requires = requires or self._requires[t.id]
        out = Tensor._wrap(value, self, len(self.entries))
        self._push(Entry(op, tuple(ids), out.id, attrs), out, requires)
        return out

    def replay(self, leaves: Mapping[int, object] | None = None) -> list[np.ndarray]:
        """Recompute every node value from the leaves.

        ``leaves`` optionally overrides leaf/const values by node id.
        """
        leaves = leaves or {}
        values: list[np.ndarray] = []
        for e in self.entries:
            if not e.inputs:
                v = leaves.get(e.output)
                values.append(self.nodes[e.output].value if v is None else np.asarray(v, np.float64))
            else:
                values.append(_FORWARD[e.op](*(values[i] for i in e.inputs), *e.attrs))
        return values


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(op: str, inputs: tuple[Tensor, ...], attrs: tuple = ()) -> Tensor:
    with np.errstate(all="ignore"):
        value = _FORWARD[op](*(t.value for t in inputs), *attrs)
    if not np.isfinite(value).all():
        raise NumericError(f"{op} produced a non-finite value")
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = t.tape
    if tape is None:
        return Tensor._wrap(np.asarray(value))
    return tape._record(op, inputs, np.asarray(value), attrs)


def _broadcast_value(a: np.ndarray, shape: tuple[int, ...], axis: int | None) -> np.ndarray:
    if axis is None:
        return np.full(shape, a.reshape(()))
    return np.ascontiguousarray(np.broadcast_to(np.expand_dims(a, axis), shape))


_FORWARD: dict[str, Callable[..., np.ndarray]] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "neg": np.negative,
    "scale": lambda a, c: a * c,
    "matmul": np.matmul,
    "transpose": lambda a: np.ascontiguousarray(a.T),
    "relu": lambda a: np.maximum(a, 0.0),
    "exp": np.exp,
    "log": np.log,
    "reciprocal": lambda a: 1.0 / a,
    "sum": lambda a, axis: np.asarray(a.sum(axis=axis)),
    "broadcast": _broadcast_value,
    "reshape": lambda a, shape: a.reshape(shape),
}


# ---------------------------------------------------------------- primitives


def _is_bias_add(a: Tensor, b: Tensor) -> bool:
    return a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    """Elementwise sum; a 1-D ``b`` is added to every row of a 2-D ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not _is_bias_add(a, b):
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _apply("add", (a, b))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not _is_bias_add(a, b):
        raise DimensionError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _apply("sub", (a, b))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mul", a, b)
    return _apply("mul", (a, b))


def neg(a) -> Tensor:
    return _apply("neg", (as_tensor(a),))


def scale(a, c: float) -> Tensor:
    """Multiply by a Python scalar (not differentiated)."""
    return _apply("scale", (as_tensor(a),), (float(c),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _apply("matmul", (a, b))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _apply("transpose", (a,))


def relu(a) -> Tensor:
    return _apply("relu", (as_tensor(a),))


def exp(a) -> Tensor:
    return _apply("exp", (as_tensor(a),))


def log(a) -> Tensor:
    return _apply("log", (as_tensor(a),))


def reciprocal(a) -> Tensor:
    return _apply("reciprocal", (as_tensor(a),))


def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    if axis is not None and not 0 <= axis < a.ndim:
        raise DimensionError(f"sum: axis {axis} out of range for shape {a.shape}")
    return _apply("sum", (a,), (axis,))


def broadcast(a, shape: Sequence[int], axis: int | None = None) -> Tensor:
    """Inverse of :func:`reduce_sum`: repeat ``a`` along ``axis`` to ``shape``.

    With ``axis=None`` a scalar is filled into ``shape``.
    """
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if axis is None:
        if a.ndim != 0:
            raise DimensionError(f"broadcast without axis needs a scalar, got {a.shape}")
    else:
        if not 0 <= axis < len(shape) or shape[:axis] + shape[axis + 1:] != a.shape:
            raise DimensionError(f"cannot broadcast {a.shape} to {shape} along axis {axis}")
    return _apply("broadcast", (a,), (shape, axis))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    return _apply("reshape", (a,), (shape,))


# ------------------------------------------------------------ backward rules
# Each rule maps (upstream, inputs, output, *attrs) to one gradient per input.


def _bw_add(g, ins, out):
    a, b = ins
    return g, (g if a.shape == b.shape else reduce_sum(g, 0))


def _bw_sub(g, ins, out):
    a, b = ins
    gb = neg(g)
    return g, (gb if a.shape == b.shape else reduce_sum(gb, 0))


def _bw_sum(g, ins, out, axis):
    return (broadcast(g, ins[0].shape, axis),)


def _bw_broadcast(g, ins, out, shape, axis):
    return (reduce_sum(g, axis),)


_BACKWARD: dict[str, Callable[..., tuple]] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": lambda g, ins, out: (mul(g, ins[1]), mul(g, ins[0])),
    "neg": lambda g, ins, out: (neg(g),),
    "scale": lambda g, ins, out, c: (scale(g, c),),
    "matmul": lambda g, ins, out: (matmul(g, transpose(ins[1])), matmul(transpose(ins[0]), g)),
    "transpose": lambda g, ins, out: (transpose(g),),
    # derivative at exactly 0 is taken as 0
    "relu": lambda g, ins, out: (mul(g, Tensor._wrap((ins[0].value > 0).astype(np.float64))),),
    "exp": lambda g, ins, out: (mul(g, out),),
    "log": lambda g, ins, out: (mul(g, reciprocal(ins[0])),),
    "reciprocal": lambda g, ins, out: (neg(mul(g, mul(out, out))),),
    "sum": _bw_sum,
    "broadcast": _bw_broadcast,
    "reshape": lambda g, ins, out, shape: (reshape(g, ins[0].shape),),
}


def grad(output: Tensor, wrt: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors that ``output`` does not depend on get a zero gradient. With
    ``create_graph=True`` the backward pass is recorded on the tape, so the
    returned gradients can themselves be differentiated.
    """
    wrt = list(wrt)
    if output.size != 1:
        raise GradientError(f"grad needs a scalar output, got shape {output.shape}")
    tape = output.tape
    zeros = [Tensor._wrap(np.zeros(w.shape)) for w in wrt]
    if tape is None:
        return zeros

    keep = {w.id for w in wrt if w.tape is tape}
    seed = np.ones(output.shape)
    adj: dict[int, Tensor] = {output.id: tape.constant(seed) if create_graph else Tensor._wrap(seed)}
    requires = tape._requires
    entries = tape.entries
    nodes = tape.nodes

    for nid in range(output.id, -1, -1):
        g = adj.get(nid) if nid in keep else adj.pop(nid, None)
        if g is None:
            continue
        op, inputs, _, attrs = entries[nid]
        if not inputs:
            continue
        need = [requires[i] for i in inputs]
        if not any(need):
            continue
        if create_graph:
            ins = tuple(nodes[i] for i in inputs)
            out = nodes[nid]
        else:
            ins = tuple(Tensor._wrap(nodes[i].value) for i in inputs)
            out = Tensor._wrap(nodes[nid].value)
        for i, gi, ok in zip(inputs, _BACKWARD[op](g, ins, out, *attrs), need):
            if not ok:
                continue
            prev = adj.get(i)
            adj[i] = gi if prev is None else add(prev, gi)

    return [adj.get(w.id, z) if w.tape is tape else z for w, z in zip(wrt, zeros)]


# ---------------------------------------------------------------- composites


def mean(a) -> Tensor:
    a = as_tensor(a)
    return scale(reduce_sum(a), 1.0 / a.size)


def squared_norm(a) -> Tensor:
    a = as_tensor(a)
    return reduce_sum(mul(a, a))


def l2_squared(a, b) -> Tensor:
    """Squared Euclidean distance between two equal-length vectors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"l2_squared: need equal-length vectors, got {a.shape} and {b.shape}")
    d = sub(a, b)
    return reduce_sum(mul(d, d))


def pairwise_sq_dists(x, c) -> Tensor:
    """Matrix of squared distances between rows of ``x`` [m, e] and ``c`` [n, e]."""
    x, c = as_tensor(x), as_tensor(c)
    if x.ndim != 2 or c.ndim != 2 or x.shape[1] != c.shape[1]:
        raise DimensionError(f"pairwise_sq_dists: incompatible {x.shape} and {c.shape}")
    m, n = x.shape[0], c.shape[0]
    xx = broadcast(reduce_sum(mul(x, x), 1), (m, n), 1)
    cc = broadcast(reduce_sum(mul(c, c), 1), (m, n), 0)
    return sub(add(xx, cc), scale(matmul(x, transpose(c)), 2.0))


def _shift_rows(logits: Tensor) -> tuple[Tensor, Tensor]:
    # The row max is treated as a constant; log-sum-exp is shift invariant,
    # so gradients of every order are unaffected.
    m = Tensor._wrap(logits.value.max(axis=1))
    return sub(logits, broadcast(m, logits.shape, 1)), m


def softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    if logits.ndim == 1:
        return reshape(softmax(reshape(logits, (1, logits.size))), logits.shape)
    shifted, _ = _shift_rows(logits)
    e = exp(shifted)
    z = broadcast(reduce_sum(e, 1), logits.shape, 1)
    return mul(e, reciprocal(z))


def _check_labels(logits: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"need logits [B, N] and B labels, got {logits.shape} and {labels.shape}")
    n = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n}), got {labels.tolist()}")
    return labels


def cross_entropy(logits, labels) -> Tensor:
    """Per-example softmax cross-entropy, shape [B]."""
    logits = as_tensor(logits)
    labels = _check_labels(logits, labels)
    shifted, m = _shift_rows(logits)
    lse = add(log(reduce_sum(exp(shifted), 1)), m)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = reduce_sum(mul(logits, Tensor._wrap(onehot)), 1)
    return sub(lse, picked)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    return mean(cross_entropy(logits, labels))
