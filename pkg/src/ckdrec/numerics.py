"""Recorded dense-tensor computations with reverse-mode gradients.

A :class:`Graph` is built define-by-run: every op computes its value
immediately and appends a node to the tape.  The recorded tape can later be
replayed with new leaf values (:meth:`Graph.evaluate`) and differentiated in a
single backward sweep (:meth:`Graph.gradients`).

Broadcasting is deliberately narrow: binary ops accept operands of equal
shape, a scalar, or a right operand whose shape is a suffix of the left
operand's shape (row-wise broadcast).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np


_LEAF_KINDS = frozenset({"param", "input", "const"})


class GraphError(ValueError):
    """Raised for shape mismatches, non-finite values and misuse of a graph."""


@dataclass(frozen=True)
class _OpDef:
    forward: Callable
    backward: Callable


@dataclass
class _Record:
    op: str
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    name: str | None = None


class Node:
    """Handle to a recorded value."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.graph._nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, _lift(self.graph, other))

    def __radd__(self, other):
        return add(self, _lift(self.graph, other))

    def __sub__(self, other):
        return sub(self, _lift(self.graph, other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(self.graph, other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(self.graph, other))

    def __repr__(self) -> str:
        return f"Node({self.graph._label(self.id)}, shape={self.shape})"


def _lift(graph: "Graph", x) -> Node:
    if isinstance(x, Node):
        return x
    return graph.const(x)


class Graph:
    """Tape of recorded ops.

    Leaves are parameters (differentiable, named), inputs (named, bindable,
    not differentiated) or anonymous constants.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._nodes: list[_Record] = []
        self._params: dict[str, int] = {}
        self._inputs: dict[str, int] = {}
        self._outputs: dict[str, int] = {}

    # -- leaves -----------------------------------------------------------
    def _leaf(self, kind: str, value, name: str | None) -> Node:
        arr = np.asarray(value, dtype=self.dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.all(np.isfinite(arr)):
            raise GraphError(f"non-finite value in {kind} leaf {name or ''}".rstrip())
        self._nodes.append(_Record(kind, (), {}, arr, name))
        return Node(self, len(self._nodes) - 1)

    def param(self, name: str, value) -> Node:
        if name in self._params or name in self._inputs:
            raise GraphError(f"duplicate leaf name {name!r}")
        node = self._leaf("param", value, name)
        self._params[name] = node.id
        return node

    def input(self, name: str, value) -> Node:
        if name in self._params or name in self._inputs:
            raise GraphError(f"duplicate leaf name {name!r}")
        node = self._leaf("input", value, name)
        self._inputs[name] = node.id
        return node

    def const(self, value) -> Node:
        return self._leaf("const", value, None)

    def mark_output(self, name: str, node: Node) -> Node:
        self._outputs[name] = node.id
        return node

    @property
    def parameters(self) -> dict[str, np.ndarray]:
        return {k: self._nodes[i].value for k, i in self._params.items()}

    def __len__(self) -> int:
        return len(self._nodes)

    # -- recording --------------------------------------------------------
    def _label(self, node_id: int) -> str:
        rec = self._nodes[node_id]
        if rec.name is not None:
            return f"{rec.op}:{rec.name}"
        return f"{rec.op}#{node_id}"

    def _record(self, op: str, inputs: tuple[Node, ...], **attrs) -> Node:
        for n in inputs:
            if n.graph is not self:
                raise GraphError(f"{op}: operand belongs to another graph")
        ids = tuple(n.id for n in inputs)
        vals = [self._nodes[i].value for i in ids]
        out = self._forward(op, ids, vals, attrs)
        self._nodes.append(_Record(op, ids, attrs, out))
        return Node(self, len(self._nodes) - 1)

    def _forward(self, op, ids, vals, attrs):
        try:
            with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                out = _OPS[op].forward(*vals, **attrs)
        except GraphError as exc:
            names = ", ".join(self._label(i) for i in ids)
            raise GraphError(f"{op}({names}): {exc}") from None
        out = np.asarray(out, dtype=self.dtype)
        if not np.all(np.isfinite(out)):
            raise GraphError(f"non-finite result in op {op} (node #{len(self._nodes)})")
        return out

    # -- replay -----------------------------------------------------------
    def evaluate(self, bindings: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
        """Recompute every node with leaves replaced by ``bindings``.

        Unbound leaves keep their recorded value.  The recorded values are
        updated in place, so a later :meth:`gradients` call differentiates at
        the new point.
        """
        bindings = dict(bindings or {})
        leaf_ids = {**self._params, **self._inputs}
        unknown = set(bindings) - set(leaf_ids)
        if unknown:
            raise GraphError(f"unknown leaf names: {sorted(unknown)}")
        for name, value in bindings.items():
            rec = self._nodes[leaf_ids[name]]
            arr = np.asarray(value, dtype=self.dtype)
            if arr.ndim == 0:
                arr = arr.reshape(1)
            if arr.shape != rec.value.shape:
                raise GraphError(
                    f"binding for {name!r} has shape {arr.shape}, leaf expects {rec.value.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise GraphError(f"non-finite binding for {name!r}")
            rec.value = arr
        for rec in self._nodes:
            if rec.op in _LEAF_KINDS:
                continue
            vals = [self._nodes[i].value for i in rec.inputs]
            rec.value = self._forward(rec.op, rec.inputs, vals, rec.attrs)
        return {k: self._nodes[i].value.copy() for k, i in self._outputs.items()}

    # -- differentiation --------------------------------------------------
    def gradients(self, output: Node | int) -> dict[str, np.ndarray]:
        """Gradients of a single-element node w.r.t. every parameter."""
        out_id = output.id if isinstance(output, Node) else int(output)
        out_val = self._nodes[out_id].value
        if out_val.size != 1:
            raise GraphError(
                f"gradients need a scalar output, {self._label(out_id)} has shape {out_val.shape}"
            )
        grads: dict[int, np.ndarray] = {out_id: np.ones_like(out_val)}
        for idx in range(out_id, -1, -1):
            rec = self._nodes[idx]
            if rec.op in _LEAF_KINDS:
                continue
            g = grads.pop(idx, None)
            if g is None:
                continue
            vals = [self._nodes[i].value for i in rec.inputs]
            in_grads = _OPS[rec.op].backward(g, vals, rec.value, **rec.attrs)
            for i, ig in zip(rec.inputs, in_grads):
                if ig is None or self._nodes[i].op in ("const", "input"):
                    continue
                if i in grads:
                    grads[i] = grads[i] + ig
                else:
                    grads[i] = ig
        result = {}
        for name, pid in self._params.items():
            g = grads.get(pid)
            result[name] = np.zeros_like(self._nodes[pid].value) if g is None else g.reshape(self._nodes[pid].value.shape)
        return result


def grad_check(graph: Graph, output: Node, step: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    Each entry's error is measured against ``max(|ad|, |fd|, 1e-4 * G)``,
    where ``G`` is the largest finite-difference magnitude in the graph:
    entries far below the gradient scale sit in difference noise.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if graph.dtype != np.float64:
        raise GraphError("grad_check requires a float64 graph")
    graph.evaluate()
    analytic = graph.gradients(output)
    base = {k: v.copy() for k, v in graph.parameters.items()}
    ad_all, fd_all = [], []
    try:
        for name, value in base.items():
            flat = value.ravel()
            fd = np.empty(flat.size)
            for j in range(flat.size):
                bumped = flat.copy()
                bumped[j] += step
                graph.evaluate({name: bumped.reshape(value.shape)})
                f_plus = float(graph._nodes[output.id].value.ravel()[0])
                bumped[j] -= 2 * step
                graph.evaluate({name: bumped.reshape(value.shape)})
                f_minus = float(graph._nodes[output.id].value.ravel()[0])
                fd[j] = (f_plus - f_minus) / (2 * step)
            graph.evaluate({name: value})
            ad_all.append(np.asarray(analytic[name], dtype=np.float64).ravel())
            fd_all.append(fd)
    finally:
        graph.evaluate(base)
    if not fd_all:
        return 0.0
    ad, fd = np.concatenate(ad_all), np.concatenate(fd_all)
    floor = max(1e-4 * float(np.abs(fd).max(initial=0.0)), 1e-8)
    denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), floor)
    return float((np.abs(ad - fd) / denom).max(initial=0.0))


# ---------------------------------------------------------------------------
# op definitions
# ---------------------------------------------------------------------------

def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or b.size == 1 and b.ndim <= 1:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise GraphError(f"shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _add_fwd(a, b):
    _check_broadcast(a, b)
    return a + (b.reshape(()) if b.size == 1 and b.shape != a.shape else b)


def _add_bwd(g, vals, out):
    a, b = vals
    return g, _reduce_to(g, b.shape)


def _sub_fwd(a, b):
    _check_broadcast(a, b)
    return a - (b.reshape(()) if b.size == 1 and b.shape != a.shape else b)


def _sub_bwd(g, vals, out):
    a, b = vals
    return g, -_reduce_to(g, b.shape)


def _mul_fwd(a, b):
    _check_broadcast(a, b)
    return a * (b.reshape(()) if b.size == 1 and b.shape != a.shape else b)


def _mul_bwd(g, vals, out):
    a, b = vals
    bb = b.reshape(()) if b.size == 1 and b.shape != a.shape else b
    return g * bb, _reduce_to(g * a, b.shape)


def _scale_fwd(a, *, c):
    return a * c


def _scale_bwd(g, vals, out, *, c):
    return (g * c,)


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise GraphError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise GraphError(f"shape mismatch {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise GraphError(f"batch dims differ {a.shape} @ {b.shape}")
    return a @ b


def _matmul_bwd(g, vals, out):
    a, b = vals
    ga = g @ np.swapaxes(b, -1, -2)
    if b.ndim == 2:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.swapaxes(a, -1, -2) @ g
    return ga, gb


def _transpose_fwd(a, *, axes):
    return np.transpose(a, axes)


def _transpose_bwd(g, vals, out, *, axes):
    return (np.transpose(g, np.argsort(axes)),)


def _reshape_fwd(a, *, shape):
    try:
        return a.reshape(shape)
    except ValueError as exc:
        raise GraphError(str(exc)) from None


def _reshape_bwd(g, vals, out, *, shape):
    return (g.reshape(vals[0].shape),)


def _gather_fwd(table, *, ids):
    if table.ndim != 2:
        raise GraphError(f"gather table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise GraphError(f"gather index out of range for table with {table.shape[0]} rows")
    return table[ids]


def _gather_bwd(g, vals, out, *, ids):
    table = vals[0]
    gt = np.zeros_like(table)
    np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
    return (gt,)


def _softmax_fwd(a):
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_bwd(g, vals, out):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _log_softmax_fwd(a):
    z = a - a.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _log_softmax_bwd(g, vals, out):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def _masked_softmax_fwd(a, *, mask):
    # mask broadcasts against a; True marks an allowed entry
    allowed = np.broadcast_to(mask, a.shape)
    if not np.all(allowed.any(axis=-1)):
        raise GraphError("masked softmax row with no allowed entries")
    z = np.where(allowed, a, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def _masked_softmax_bwd(g, vals, out, *, mask):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _layer_norm_fwd(x, gain, bias, *, eps):
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise GraphError(f"shape mismatch {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def _layer_norm_bwd(g, vals, out, *, eps):
    x, gain, bias = vals
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    gxhat = g * gain
    gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
    lead = tuple(range(x.ndim - 1))
    return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)


def _log_fwd(a):
    if np.any(a <= 0):
        raise GraphError("log of non-positive value")
    return np.log(a)


def _log_bwd(g, vals, out):
    return (g / vals[0],)


def _exp_fwd(a):
    return np.exp(a)


def _exp_bwd(g, vals, out):
    return (g * out,)


def _relu_fwd(a):
    return np.maximum(a, 0.0)


def _relu_bwd(g, vals, out):
    return (g * (vals[0] > 0),)


def _sum_fwd(a, *, axis):
    if axis is None:
        return np.asarray(a.sum()).reshape(1)
    return a.sum(axis=axis)


def _sum_bwd(g, vals, out, *, axis):
    a = vals[0]
    if axis is None:
        return (np.broadcast_to(g.reshape(()), a.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)


def _mean_fwd(a, *, axis):
    if axis is None:
        return np.asarray(a.mean()).reshape(1)
    return a.mean(axis=axis)


def _mean_bwd(g, vals, out, *, axis):
    a = vals[0]
    n = a.size if axis is None else a.shape[axis]
    gs, = _sum_bwd(g, vals, out, axis=axis)
    return (gs / n,)


def _dropout_fwd(a, *, mask):
    return a if mask is None else a * mask


def _dropout_bwd(g, vals, out, *, mask):
    return (g if mask is None else g * mask,)


_OPS: dict[str, _OpDef] = {
    "add": _OpDef(_add_fwd, _add_bwd),
    "sub": _OpDef(_sub_fwd, _sub_bwd),
    "mul": _OpDef(_mul_fwd, _mul_bwd),
    "scale": _OpDef(_scale_fwd, _scale_bwd),
    "matmul": _OpDef(_matmul_fwd, _matmul_bwd),
    "transpose": _OpDef(_transpose_fwd, _transpose_bwd),
    "reshape": _OpDef(_reshape_fwd, _reshape_bwd),
    "gather": _OpDef(_gather_fwd, _gather_bwd),
    "softmax": _OpDef(_softmax_fwd, _softmax_bwd),
    "log_softmax": _OpDef(_log_softmax_fwd, _log_softmax_bwd),
    "masked_softmax": _OpDef(_masked_softmax_fwd, _masked_softmax_bwd),
    "layer_norm": _OpDef(_layer_norm_fwd, _layer_norm_bwd),
    "log": _OpDef(_log_fwd, _log_bwd),
    "exp": _OpDef(_exp_fwd, _exp_bwd),
    "relu": _OpDef(_relu_fwd, _relu_bwd),
    "sum": _OpDef(_sum_fwd, _sum_bwd),
    "mean": _OpDef(_mean_fwd, _mean_bwd),
    "dropout": _OpDef(_dropout_fwd, _dropout_bwd),
}


# ---------------------------------------------------------------------------
# public op constructors
# ---------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    return a.graph._record("add", (a, b))


def sub(a: Node, b: Node) -> Node:
    return a.graph._record("sub", (a, b))


def mul(a: Node, b: Node) -> Node:
    return a.graph._record("mul", (a, b))


def scale(a: Node, c: float) -> Node:
    return a.graph._record("scale", (a,), c=float(c))


def matmul(a: Node, b: Node) -> Node:
    """``a @ b``; ``b`` is either a 2-D weight or has the same batch dims as ``a``."""
    return a.graph._record("matmul", (a, b))


def transpose(a: Node, axes: tuple[int, ...]) -> Node:
    return a.graph._record("transpose", (a,), axes=tuple(axes))


def reshape(a: Node, shape: tuple[int, ...]) -> Node:
    return a.graph._record("reshape", (a,), shape=tuple(shape))


def gather(table: Node, ids) -> Node:
    """Embedding lookup: rows of ``table`` at integer ``ids`` (any shape)."""
    return table.graph._record("gather", (table,), ids=np.asarray(ids, dtype=np.int64))


def softmax(a: Node) -> Node:
    """Softmax along the last axis."""
    return a.graph._record("softmax", (a,))


def log_softmax(a: Node) -> Node:
    return a.graph._record("log_softmax", (a,))


def masked_softmax(a: Node, mask) -> Node:
    """Softmax along the last axis restricted to entries where ``mask`` is true.

    Masked entries come out exactly zero.  This is the attention primitive;
    ``mask`` broadcasts against ``a``.
    """
    return a.graph._record("masked_softmax", (a,), mask=np.asarray(mask, dtype=bool))


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = 1e-8) -> Node:
    return x.graph._record("layer_norm", (x, gain, bias), eps=float(eps))


def log(a: Node) -> Node:
    return a.graph._record("log", (a,))


def exp(a: Node) -> Node:
    return a.graph._record("exp", (a,))


def relu(a: Node) -> Node:
    return a.graph._record("relu", (a,))


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001
    return a.graph._record("sum", (a,), axis=axis)


def mean(a: Node, axis: int | None = None) -> Node:
    return a.graph._record("mean", (a,), axis=axis)


def dropout(a: Node, rate: float, rng: np.random.Generator | None, training: bool) -> Node:
    """Inverted dropout.

    The keep-mask is drawn once from ``rng`` at record time and stored on the
    node, so replays are deterministic.  In evaluation mode (or rate 0) the op
    is the identity.
    """
    if not training or rate <= 0.0:
        return a.graph._record("dropout", (a,), mask=None)
    if rng is None:
        raise GraphError("training-mode dropout needs an rng")
    keep = rng.random(a.shape) >= rate
    mask = keep.astype(a.graph.dtype) / (1.0 - rate)
    return a.graph._record("dropout", (a,), mask=mask)
