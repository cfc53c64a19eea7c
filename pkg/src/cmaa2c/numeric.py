"""Dense matrices, a reverse-mode tape, and the parameter checkpoint format.

Every value is a 2-D float64 ``numpy`` array. Network code is written once
against the small op vocabulary below and runs either on a :class:`Tape`
(records nodes, supports :func:`backward`) or on :class:`Eval` (plain
evaluation for rollouts, no bookkeeping).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

CHECKPOINT_MAGIC = b"CMA2CKPT"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


def as_matrix(value, name: str = "value") -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _shape_error(op: str, *shapes) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes " + " and ".join(str(s) for s in shapes))


# ---------------------------------------------------------------------------
# op table: forward(values, attrs) -> out ; backward(g, values, out, attrs) -> grads
# backward may return None for an operand listed as not needing a gradient in attrs["needs"]


def _f_matmul(v, a):
    x, w = v
    if x.shape[1] != w.shape[0]:
        raise _shape_error("matmul", x.shape, w.shape)
    return x @ w


def _b_matmul(g, v, out, a):
    x, w = v
    needs = a.get("needs", (True, True))
    return (g @ w.T if needs[0] else None), (x.T @ g if needs[1] else None)


def _f_add(v, a):
    x, y = v
    if x.shape != y.shape:
        raise _shape_error("add", x.shape, y.shape)
    return x + y


def _b_add(g, v, out, a):
    return g, g


def _f_add_row(v, a):
    x, r = v
    if r.shape != (1, x.shape[1]):
        raise _shape_error("add_row", x.shape, r.shape)
    return x + r


def _b_add_row(g, v, out, a):
    return g, g.sum(axis=0, keepdims=True)


def _f_mul(v, a):
    x, y = v
    if x.shape != y.shape:
        raise _shape_error("mul", x.shape, y.shape)
    return x * y


def _b_mul(g, v, out, a):
    x, y = v
    return g * y, g * x


def _f_relu(v, a):
    return np.maximum(v[0], 0.0)


def _b_relu(g, v, out, a):
    return (g * (v[0] > 0.0),)


def _f_tanh(v, a):
    return np.tanh(v[0])


def _b_tanh(g, v, out, a):
    return (g * (1.0 - out * out),)


def _f_exp(v, a):
    return np.exp(v[0])


def _b_exp(g, v, out, a):
    return (g * out,)


def _f_log(v, a):
    if np.any(v[0] <= 0.0):
        raise ValueError("log: non-positive entries")
    return np.log(v[0])


def _b_log(g, v, out, a):
    return (g / v[0],)


def _f_softmax(v, a):
    x = v[0]
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _b_softmax(g, v, out, a):
    return (out * (g - (g * out).sum(axis=1, keepdims=True)),)


def _f_sum(v, a):
    return np.array([[v[0].sum()]])


def _b_sum(g, v, out, a):
    return (np.full_like(v[0], g[0, 0]),)


def _f_mean(v, a):
    return np.array([[v[0].mean()]])


def _b_mean(g, v, out, a):
    return (np.full_like(v[0], g[0, 0] / v[0].size),)


def _f_scale(v, a):
    return v[0] * a["c"]


def _b_scale(g, v, out, a):
    return (g * a["c"],)


def _f_slice_rows(v, a):
    x = v[0]
    start, stop = a["start"], a["stop"]
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for shape {x.shape}")
    return x[start:stop]


def _b_slice_rows(g, v, out, a):
    gx = np.zeros_like(v[0])
    gx[a["start"]:a["stop"]] = g
    return (gx,)


def _f_concat_rows(v, a):
    cols = {x.shape[1] for x in v}
    if len(cols) != 1:
        raise _shape_error("concat_rows", *(x.shape for x in v))
    return np.concatenate(v, axis=0)


def _b_concat_rows(g, v, out, a):
    grads, start = [], 0
    for x in v:
        grads.append(g[start:start + x.shape[0]])
        start += x.shape[0]
    return tuple(grads)


def _f_transpose(v, a):
    return v[0].T.copy()


def _b_transpose(g, v, out, a):
    return (g.T,)


OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_f_matmul, _b_matmul),
    "add": (_f_add, _b_add),
    "add_row": (_f_add_row, _b_add_row),
    "mul": (_f_mul, _b_mul),
    "relu": (_f_relu, _b_relu),
    "tanh": (_f_tanh, _b_tanh),
    "exp": (_f_exp, _b_exp),
    "log": (_f_log, _b_log),
    "softmax": (_f_softmax, _b_softmax),
    "sum": (_f_sum, _b_sum),
    "mean": (_f_mean, _b_mean),
    "scale": (_f_scale, _b_scale),
    "slice_rows": (_f_slice_rows, _b_slice_rows),
    "concat_rows": (_f_concat_rows, _b_concat_rows),
    "transpose": (_f_transpose, _b_transpose),
}


class _Ops:
    """Named helpers shared by :class:`Tape` and :class:`Eval`."""

    def apply(self, op, *inputs, **attrs):  # pragma: no cover - abstract
        raise NotImplementedError

    def matmul(self, x, w):
        return self.apply("matmul", x, w)

    def add(self, x, y):
        return self.apply("add", x, y)

    def add_row(self, x, row):
        return self.apply("add_row", x, row)

    def mul(self, x, y):
        return self.apply("mul", x, y)

    def relu(self, x):
        return self.apply("relu", x)

    def tanh(self, x):
        return self.apply("tanh", x)

    def exp(self, x):
        return self.apply("exp", x)

    def log(self, x):
        return self.apply("log", x)

    def softmax(self, x):
        return self.apply("softmax", x)

    def sum(self, x):
        return self.apply("sum", x)

    def mean(self, x):
        return self.apply("mean", x)

    def scale(self, x, c: float):
        return self.apply("scale", x, c=float(c))

    def slice_rows(self, x, start: int, stop: int):
        return self.apply("slice_rows", x, start=int(start), stop=int(stop))

    def concat_rows(self, xs):
        return self.apply("concat_rows", *xs)

    def transpose(self, x):
        return self.apply("transpose", x)

    def linear(self, x, w, b=None):
        y = self.matmul(x, w)
        return y if b is None else self.add_row(y, b)


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    adjoint: np.ndarray | None
    attrs: dict = field(default_factory=dict)
    requires_grad: bool = False


class Var:
    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        node = self.tape.nodes[self.index]
        return f"Var({self.index}, {node.op}, shape={node.value.shape})"


class Tape(_Ops):
    """Append-only record of a computation, in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, op, parents, value, attrs=None, requires_grad=False) -> Var:
        adjoint = np.zeros_like(value) if requires_grad else None
        self.nodes.append(Node(op, parents, value, adjoint, attrs or {}, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, name: str = "leaf") -> Var:
        return self._push("leaf", (), as_matrix(value, name), {"name": name}, True)

    def const(self, value) -> Var:
        return self._push("const", (), as_matrix(value, "const"))

    def bind(self, params: dict[str, np.ndarray]) -> dict[str, Var]:
        return {k: self.leaf(v, k) for k, v in params.items()}

    def _var(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("operand belongs to a different tape")
            return x
        return self.const(x)

    def apply(self, op, *inputs, **attrs) -> Var:
        if op not in OPS:
            raise ValueError(f"unknown op {op!r}")
        vs = [self._var(x) for x in inputs]
        fwd, _ = OPS[op]
        value = fwd([self.nodes[v.index].value for v in vs], attrs)
        grad = any(self.nodes[v.index].requires_grad for v in vs)
        return self._push(op, tuple(v.index for v in vs), value, attrs, grad)


class Eval(_Ops):
    """Direct evaluation with the same surface as :class:`Tape`."""

    def leaf(self, value, name: str = "leaf") -> np.ndarray:
        return as_matrix(value, name)

    def const(self, value) -> np.ndarray:
        return as_matrix(value, "const")

    def bind(self, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return params

    def apply(self, op, *inputs, **attrs) -> np.ndarray:
        fwd, _ = OPS[op]
        return fwd([np.asarray(x, dtype=np.float64) for x in inputs], attrs)


def forward(tape: Tape, op: str, inputs, **attrs) -> Var:
    return tape.apply(op, *inputs, **attrs)


def backward(tape: Tape, output: Var) -> dict[int, np.ndarray]:
    """Propagate adjoints from a scalar node; returns ``{leaf index: gradient}``."""
    out = tape.nodes[output.index]
    if out.value.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar output, got shape {out.value.shape}")
    if not out.requires_grad:
        return {i: np.zeros_like(n.value) for i, n in enumerate(tape.nodes) if n.op == "leaf"}
    for node in tape.nodes:
        if node.requires_grad:
            node.adjoint = np.zeros_like(node.value)
    out.adjoint = np.ones((1, 1))
    for k in range(output.index, -1, -1):
        node = tape.nodes[k]
        if not node.parents or not node.requires_grad:
            continue
        _, bwd = OPS[node.op]
        needs = tuple(tape.nodes[p].requires_grad for p in node.parents)
        grads = bwd(node.adjoint, [tape.nodes[p].value for p in node.parents], node.value,
                    {**node.attrs, "needs": needs})
        for p, g, need in zip(node.parents, grads, needs):
            if need:
                tape.nodes[p].adjoint = tape.nodes[p].adjoint + g
    return {i: n.adjoint for i, n in enumerate(tape.nodes) if n.op == "leaf"}


def grad(tape: Tape, output: Var, params: dict[str, Var]) -> dict[str, np.ndarray]:
    """Gradients of a scalar with respect to a dict of bound leaves."""
    g = backward(tape, output)
    return {k: g[v.index] for k, v in params.items()}


# ---------------------------------------------------------------------------
# checkpoints


def save_blocks(path, blocks: dict[str, np.ndarray]) -> None:
    """Write named matrices: magic, version byte, block count, then
    (name length, name, rows, cols, row-major little-endian float64) per block."""
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<BI", CHECKPOINT_VERSION, len(blocks))
    for name, value in blocks.items():
        m = as_matrix(value, name)
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<II", *m.shape)
        buf += m.astype("<f8").tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_blocks(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<BI", data, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += 5
    blocks = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        size = rows * cols * 8
        blocks[name] = np.frombuffer(data[pos:pos + size], dtype="<f8").reshape(rows, cols).astype(np.float64)
        pos += size
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after last block")
    return blocks
