"""Dense float64 tensors, a reverse-mode tape, and AdamW with linear warmup.

Values are numpy float64 arrays; the tape is a flat, topologically ordered
list of nodes.  Node values are computed eagerly at construction (define by
run), and ``eval_graph`` can replay the whole tape as a pure function of the
leaf values, which is what the oracle tests exercise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Array = np.ndarray


class TapeError(ValueError):
    """Bad op arguments: shape mismatch, wrong arity, non-scalar loss."""


class NonFiniteError(ValueError):
    """A value that must be finite (gradient, logit) is inf or nan."""


def _as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class TapeNode:
    op: str
    inputs: tuple[int, ...]
    value: Array
    adjoint: Array | None = None
    aux: object = None
    needs_grad: bool = True


# op name -> forward(input values, aux) -> value.  Single source of truth:
# node construction and eval_graph replay both go through this table.
_FORWARD: dict[str, Callable] = {}
# op name -> backward(node, input values, output grad) -> tuple of input grads
_BACKWARD: dict[str, Callable] = {}


def _op(name):
    def deco(fn):
        _FORWARD[name] = fn
        return fn
    return deco


def _grad(name):
    def deco(fn):
        _BACKWARD[name] = fn
        return fn
    return deco


@_op("leaf")
def _f_leaf(vals, aux):
    raise TapeError("leaf nodes have no forward rule")


@_op("matmul")
def _f_matmul(vals, aux):
    a, b = vals
    return a @ b


@_grad("matmul")
def _g_matmul(vals, aux, g):
    a, b = vals
    return g @ b.T, a.T @ g


@_op("add")
def _f_add(vals, aux):
    return vals[0] + vals[1]


@_grad("add")
def _g_add(vals, aux, g):
    a, b = vals
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


@_op("sub")
def _f_sub(vals, aux):
    return vals[0] - vals[1]


@_grad("sub")
def _g_sub(vals, aux, g):
    a, b = vals
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


@_op("mul")
def _f_mul(vals, aux):
    return vals[0] * vals[1]


@_grad("mul")
def _g_mul(vals, aux, g):
    a, b = vals
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@_op("div")
def _f_div(vals, aux):
    return vals[0] / vals[1]


@_grad("div")
def _g_div(vals, aux, g):
    a, b = vals
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


@_op("neg")
def _f_neg(vals, aux):
    return -vals[0]


@_grad("neg")
def _g_neg(vals, aux, g):
    return (-g,)


@_op("scale")
def _f_scale(vals, aux):
    return vals[0] * aux


@_grad("scale")
def _g_scale(vals, aux, g):
    return (g * aux,)


@_op("shift")
def _f_shift(vals, aux):
    return vals[0] + aux


@_grad("shift")
def _g_shift(vals, aux, g):
    return (g,)


@_op("sin")
def _f_sin(vals, aux):
    return np.sin(vals[0])


@_grad("sin")
def _g_sin(vals, aux, g):
    return (g * np.cos(vals[0]),)


@_op("tanh")
def _f_tanh(vals, aux):
    return np.tanh(vals[0])


@_grad("tanh")
def _g_tanh(vals, aux, g):
    t = np.tanh(vals[0])
    return (g * (1.0 - t * t),)


@_op("relu")
def _f_relu(vals, aux):
    return np.maximum(vals[0], 0.0)


@_grad("relu")
def _g_relu(vals, aux, g):
    return (g * (vals[0] > 0.0),)


@_op("silu")
def _f_silu(vals, aux):
    return vals[0] * _sigmoid(vals[0])


@_grad("silu")
def _g_silu(vals, aux, g):
    s = _sigmoid(vals[0])
    return (g * (s * (1.0 + vals[0] * (1.0 - s))),)


@_op("exp")
def _f_exp(vals, aux):
    return np.exp(vals[0])


@_grad("exp")
def _g_exp(vals, aux, g):
    return (g * np.exp(vals[0]),)


@_op("log")
def _f_log(vals, aux):
    return np.log(vals[0])


@_grad("log")
def _g_log(vals, aux, g):
    return (g / vals[0],)


@_op("sum")
def _f_sum(vals, aux):
    return np.asarray(vals[0].sum())


@_grad("sum")
def _g_sum(vals, aux, g):
    return (np.broadcast_to(g, vals[0].shape).copy(),)


@_op("mean")
def _f_mean(vals, aux):
    return np.asarray(vals[0].mean())


@_grad("mean")
def _g_mean(vals, aux, g):
    a = vals[0]
    return (np.broadcast_to(g / a.size, a.shape).copy(),)


@_op("norm")
def _f_norm(vals, aux):
    return np.asarray(np.sqrt((vals[0] ** 2).sum()))


@_grad("norm")
def _g_norm(vals, aux, g):
    a = vals[0]
    n = np.sqrt((a ** 2).sum())
    if n == 0.0:
        return (np.zeros_like(a),)
    return (g * a / n,)


@_op("normalize_rows")
def _f_normalize_rows(vals, aux):
    a = vals[0]
    n = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    safe = np.where(n == 0.0, 1.0, n)
    return a / safe


@_grad("normalize_rows")
def _g_normalize_rows(vals, aux, g):
    a = vals[0]
    n = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    safe = np.where(n == 0.0, 1.0, n)
    u = a / safe
    # rows with zero norm get zero gradient; elsewhere project out the
    # radial component and divide by the norm
    inner = (g * u).sum(axis=-1, keepdims=True)
    grad = (g - u * inner) / safe
    return (np.where(n == 0.0, 0.0, grad),)


@_op("softmax")
def _f_softmax(vals, aux):
    x = vals[0]
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@_grad("softmax")
def _g_softmax(vals, aux, g):
    s = _f_softmax(vals, aux)
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


@_op("log_softmax")
def _f_log_softmax(vals, aux):
    x = vals[0]
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@_grad("log_softmax")
def _g_log_softmax(vals, aux, g):
    s = _f_softmax(vals, aux)
    return (g - s * g.sum(axis=-1, keepdims=True),)


@_op("concat")
def _f_concat(vals, aux):
    return np.concatenate(vals, axis=-1)


@_grad("concat")
def _g_concat(vals, aux, g):
    splits = np.cumsum([v.shape[-1] for v in vals])[:-1]
    return tuple(np.split(g, splits, axis=-1))


@_op("slice")
def _f_slice(vals, aux):
    start, stop = aux
    return vals[0][start:stop]


@_grad("slice")
def _g_slice(vals, aux, g):
    start, stop = aux
    out = np.zeros_like(vals[0])
    out[start:stop] = g
    return (out,)


@_op("reshape")
def _f_reshape(vals, aux):
    return vals[0].reshape(aux)


@_grad("reshape")
def _g_reshape(vals, aux, g):
    return (g.reshape(vals[0].shape),)


@_op("transpose")
def _f_transpose(vals, aux):
    return vals[0].T


@_grad("transpose")
def _g_transpose(vals, aux, g):
    return (g.T,)


@dataclass(frozen=True)
class Var:
    """Handle onto one tape node; supports operator sugar."""

    tape: "Tape"
    idx: int

    @property
    def value(self) -> Array:
        return self.tape.nodes[self.idx].value

    @property
    def grad(self) -> Array | None:
        return self.tape.nodes[self.idx].adjoint

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise TapeError("cannot mix vars from different tapes")
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return self.tape._apply("add", (self, self._lift(other)))

    def __radd__(self, other):
        return self._lift(other) + self

    def __sub__(self, other):
        return self.tape._apply("sub", (self, self._lift(other)))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        return self.tape._apply("mul", (self, self._lift(other)))

    def __rmul__(self, other):
        return self._lift(other) * self

    def __truediv__(self, other):
        return self.tape._apply("div", (self, self._lift(other)))

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __matmul__(self, other):
        return self.tape._apply("matmul", (self, self._lift(other)))

    def __neg__(self):
        return self.tape._apply("neg", (self,))

    def scale(self, c: float):
        return self.tape._apply("scale", (self,), aux=float(c))

    def shift(self, c: float):
        return self.tape._apply("shift", (self,), aux=float(c))

    def sin(self):
        return self.tape._apply("sin", (self,))

    def tanh(self):
        return self.tape._apply("tanh", (self,))

    def relu(self):
        return self.tape._apply("relu", (self,))

    def silu(self):
        return self.tape._apply("silu", (self,))

    def exp(self):
        return self.tape._apply("exp", (self,))

    def log(self):
        return self.tape._apply("log", (self,))

    def sum(self):
        return self.tape._apply("sum", (self,))

    def mean(self):
        return self.tape._apply("mean", (self,))

    def norm(self):
        return self.tape._apply("norm", (self,))

    def normalize_rows(self):
        return self.tape._apply("normalize_rows", (self,))

    def softmax(self):
        return self.tape._apply("softmax", (self,))

    def log_softmax(self):
        return self.tape._apply("log_softmax", (self,))

    def slice(self, start: int, stop: int):
        return self.tape._apply("slice", (self,), aux=(int(start), int(stop)))

    def reshape(self, shape: tuple[int, ...]):
        return self.tape._apply("reshape", (self,), aux=tuple(int(s) for s in shape))

    @property
    def T(self):
        return self.tape._apply("transpose", (self,))


class Tape:
    """Append-only record of ops; nodes only reference earlier nodes."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def leaf(self, value, needs_grad: bool = True) -> Var:
        v = _as_f64(value)
        self.nodes.append(TapeNode("leaf", (), v, needs_grad=needs_grad))
        return Var(self, len(self.nodes) - 1)

    def constant(self, value) -> Var:
        return self.leaf(value, needs_grad=False)

    def concat(self, parts: list[Var]) -> Var:
        return self._apply("concat", tuple(parts))

    def _apply(self, op: str, inputs: tuple[Var, ...], aux=None) -> Var:
        nid = len(self.nodes)
        vals = [p.value for p in inputs]
        self._check_shapes(op, nid, vals, aux)
        value = _FORWARD[op](vals, aux)
        needs = any(self.nodes[p.idx].needs_grad for p in inputs)
        self.nodes.append(
            TapeNode(op, tuple(p.idx for p in inputs), _as_f64(value), aux=aux,
                     needs_grad=needs)
        )
        return Var(self, nid)

    @staticmethod
    def _check_shapes(op, nid, vals, aux):
        if op == "matmul":
            a, b = vals
            if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
                raise TapeError(
                    f"node {nid}: matmul shapes {a.shape} x {b.shape} incompatible")
        elif op in ("add", "sub", "mul", "div"):
            a, b = vals
            try:
                np.broadcast_shapes(a.shape, b.shape)
            except ValueError:
                raise TapeError(
                    f"node {nid}: {op} shapes {a.shape} vs {b.shape} do not broadcast")
        elif op == "concat":
            if not vals:
                raise TapeError(f"node {nid}: concat of nothing")
            lead = [v.shape[:-1] for v in vals]
            if any(s != lead[0] for s in lead):
                raise TapeError(f"node {nid}: concat leading shapes differ: {lead}")
        elif op == "slice":
            start, stop = aux
            if vals[0].ndim != 1 or not (0 <= start <= stop <= vals[0].shape[0]):
                raise TapeError(
                    f"node {nid}: slice [{start}:{stop}] invalid for shape {vals[0].shape}")
        elif op == "reshape":
            if int(np.prod(aux)) != vals[0].size:
                raise TapeError(
                    f"node {nid}: cannot reshape {vals[0].shape} to {aux}")
        elif op == "transpose":
            if vals[0].ndim != 2:
                raise TapeError(f"node {nid}: transpose needs a matrix")
        elif op in ("normalize_rows", "softmax", "log_softmax"):
            if vals[0].ndim < 1:
                raise TapeError(f"node {nid}: {op} needs at least one axis")


def eval_graph(tape: Tape) -> Array:
    """Replay the tape from its leaf values; returns the final node's value.

    Pure: repeated calls with unchanged leaves give bit-identical results.
    """
    if not tape.nodes:
        raise TapeError("empty tape")
    values: list[Array] = []
    for nid, node in enumerate(tape.nodes):
        if any(i >= nid for i in node.inputs):
            raise TapeError(f"node {nid}: inputs not topologically ordered")
        if node.op == "leaf":
            values.append(node.value)
        else:
            values.append(_as_f64(_FORWARD[node.op]([values[i] for i in node.inputs],
                                                    node.aux)))
    return values[-1]


def backward(tape: Tape, loss: Var) -> dict[int, Array]:
    """Reverse accumulation from a scalar loss; returns adjoints per leaf."""
    node = tape.nodes[loss.idx]
    if node.value.size != 1:
        raise TapeError(
            f"node {loss.idx}: loss must be scalar, got shape {node.value.shape}")
    for n in tape.nodes:
        n.adjoint = None
    adj: list[Array | None] = [None] * (loss.idx + 1)
    adj[loss.idx] = np.ones_like(node.value)
    for nid in range(loss.idx, -1, -1):
        g = adj[nid]
        if g is None:
            continue
        cur = tape.nodes[nid]
        cur.adjoint = g
        if cur.op == "leaf" or not cur.needs_grad:
            continue
        vals = [tape.nodes[i].value for i in cur.inputs]
        grads = _BACKWARD[cur.op](vals, cur.aux, g)
        for inp, ig in zip(cur.inputs, grads):
            if not tape.nodes[inp].needs_grad:
                continue
            if adj[inp] is None:
                adj[inp] = np.zeros_like(tape.nodes[inp].value)
            adj[inp] = adj[inp] + ig
    return {i: n.adjoint for i, n in enumerate(tape.nodes)
            if n.op == "leaf" and n.needs_grad and n.adjoint is not None}


@dataclass
class AdamState:
    """AdamW with decoupled weight decay and linear learning-rate warmup.

    With ``warmup_steps == 0`` the schedule is flat; otherwise the effective
    rate at step t is lr * min(1, t / warmup_steps).
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int = 0
    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)

    def effective_lr(self, step: int) -> float:
        if self.warmup_steps > 0:
            return self.lr * min(1.0, step / self.warmup_steps)
        return self.lr


def adam_step(state: AdamState, params: dict[str, Array],
              grads: dict[str, Array]) -> dict[str, Array]:
    """One optimizer step; returns new parameter arrays, mutates state."""
    state.step += 1
    t = state.step
    lr = state.effective_lr(t)
    b1, b2 = state.beta1, state.beta2
    out: dict[str, Array] = {}
    for name, p in params.items():
        if name not in grads:
            raise NonFiniteError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != p.shape:
            raise TapeError(
                f"parameter {name!r}: gradient shape {g.shape} != {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        out[name] = p - lr * (mhat / (np.sqrt(vhat) + state.eps)
                              + state.weight_decay * p)
    return out
