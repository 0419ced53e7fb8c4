"""Minimal dense-tensor math with reverse-mode differentiation.

A :class:`Tape` records every primitive application as a node (primitive id,
parent node ids, saved output), in topological order by construction.
:func:`backprop` walks the tape backwards and returns a gradient map keyed by
parameter name; :func:`grad_check` verifies any recorded loss against central
finite differences.

The primitive set is deliberately closed: exactly what a pooled-embedding
classifier with soft-distribution targets needs, each with a hand-written
backward rule. All numerics are 64-bit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

CLAMP_MIN = 1e-12  # floor for predicted probabilities before any log


class ShapeError(ValueError):
    """Inputs do not conform to a primitive's signature."""


class TapeError(RuntimeError):
    """Structural misuse of the tape (non-scalar loss, unknown primitive, ...)."""


class Tensor:
    """Dense float64 array, optionally trainable.

    Tensors are plain value holders; all operator logic lives in the tape
    primitives. ``name`` identifies trainable parameters in gradient maps.
    """

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node = None  # (tape, node index) when produced by a tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def detach(self) -> "Tensor":
        """Copy of the value with gradient tracking severed."""
        return Tensor(self.data.copy(), requires_grad=False, name=None)

    def __getstate__(self):
        return {"data": self.data, "requires_grad": self.requires_grad, "name": self.name}

    def __setstate__(self, state):
        self.data = state["data"]
        self.requires_grad = state["requires_grad"]
        self.name = state["name"]
        self._node = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.data.shape)}{tag}, requires_grad={self.requires_grad})"


# ---------------------------------------------------------------------------
# forward / backward rules
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis (vector, or row-wise for a matrix)."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax: empty input")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_distribution(name: str, arg: str, x: np.ndarray) -> None:
    sums = x.sum(axis=-1)
    if not np.all(np.abs(sums - 1.0) <= 1e-6):
        raise ValueError(f"{name}: {arg} does not sum to 1 (got sums {sums})")


def _kl_forward(target: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    if target.shape != predicted.shape:
        raise ShapeError(
            f"kl_div: shape mismatch {tuple(target.shape)} vs {tuple(predicted.shape)}"
        )
    if target.ndim not in (1, 2) or target.shape[-1] < 1:
        raise ShapeError(f"kl_div: expected vector or matrix, got shape {tuple(target.shape)}")
    _check_distribution("kl_div", "target", target)
    _check_distribution("kl_div", "predicted", predicted)
    clamped = np.maximum(predicted, CLAMP_MIN)
    # 0 * log 0 = 0 convention for target entries.
    log_t = np.log(np.where(target > 0.0, target, 1.0))
    terms = target * (log_t - np.log(clamped))
    return terms.sum(axis=-1)


def kl_divergence(target, predicted) -> float:
    """KL(target || predicted) in nats, for two probability vectors.

    Predicted entries are clamped at ``CLAMP_MIN`` before the log, so the
    result is always finite.
    """
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if t.ndim != 1:
        raise ShapeError(f"kl_divergence: expected vectors, got shape {tuple(t.shape)}")
    return float(_kl_forward(t, p))


def _fwd_matmul(a, b):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: expected 1-D or 2-D inputs, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return np.matmul(a, b)


def _bwd_matmul(grad, inputs, out):
    a, b = inputs
    if a.ndim == 2 and b.ndim == 2:
        return [np.matmul(grad, b.T), np.matmul(a.T, grad)]
    if a.ndim == 1 and b.ndim == 2:
        return [np.matmul(b, grad), np.outer(a, grad)]
    if a.ndim == 2 and b.ndim == 1:
        return [np.outer(grad, b), np.matmul(a.T, grad)]
    return [grad * b, grad * a]  # 1-D dot


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _fwd_add(a, b):
    _same_shape("add", a, b)
    return a + b


def _fwd_sub(a, b):
    _same_shape("sub", a, b)
    return a - b


def _fwd_mul(a, b):
    _same_shape("mul", a, b)
    return a * b


def _fwd_scale(a, *, c):
    return a * float(c)


def _fwd_add_row(m, v):
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"add_row: cannot add row {tuple(v.shape)} to {tuple(m.shape)}")
    return m + v


def _fwd_transpose(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {tuple(a.shape)}")
    return a.T.copy()


def _fwd_gather(table, *, ids):
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"gather: expected a matrix table, got shape {tuple(table.shape)}")
    if ids.ndim != 1 or ids.size == 0:
        raise ShapeError("gather: ids must be a nonempty 1-D integer array")
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ShapeError(f"gather: id out of range for table with {table.shape[0]} rows")
    return table[ids]


def _bwd_gather(grad, inputs, out, *, ids):
    (table,) = inputs
    g = np.zeros_like(table)
    np.add.at(g, np.asarray(ids), grad)
    return [g]


def _fwd_bag_mean(table, *, bags):
    if table.ndim != 2:
        raise ShapeError(f"bag_mean: expected a matrix table, got shape {tuple(table.shape)}")
    rows = []
    for ids in bags:
        ids = np.asarray(ids)
        if ids.size == 0:
            raise ShapeError("bag_mean: empty id bag")
        if ids.min() < 0 or ids.max() >= table.shape[0]:
            raise ShapeError(f"bag_mean: id out of range for table with {table.shape[0]} rows")
        rows.append(table[ids].mean(axis=0))
    return np.stack(rows)


def _bwd_bag_mean(grad, inputs, out, *, bags):
    (table,) = inputs
    g = np.zeros_like(table)
    for row, ids in enumerate(bags):
        ids = np.asarray(ids)
        np.add.at(g, ids, grad[row] / ids.size)
    return [g]


def _fwd_mean(a, *, axis):
    if not (0 <= axis < a.ndim):
        raise ShapeError(f"mean: axis {axis} invalid for shape {tuple(a.shape)}")
    return a.mean(axis=axis)


def _bwd_mean(grad, inputs, out, *, axis):
    (a,) = inputs
    n = a.shape[axis]
    return [np.broadcast_to(np.expand_dims(grad, axis) / n, a.shape).copy()]


def _fwd_sum(a):
    return np.asarray(a.sum())


def _bwd_sum(grad, inputs, out):
    (a,) = inputs
    return [np.full_like(a, float(grad))]


def _fwd_tanh(a):
    return np.tanh(a)


def _bwd_tanh(grad, inputs, out):
    return [grad * (1.0 - out * out)]


def _fwd_log(a):
    if np.any(a <= 0.0):
        raise ValueError("log: domain error, all entries must be strictly positive")
    return np.log(a)


def _bwd_log(grad, inputs, out):
    (a,) = inputs
    return [grad / a]


def _fwd_softmax(a):
    return softmax(a)


def _bwd_softmax(grad, inputs, out):
    inner = (grad * out).sum(axis=-1, keepdims=True)
    return [out * (grad - inner)]


def _bwd_kl_div(grad, inputs, out):
    target, predicted = inputs
    clamped = np.maximum(predicted, CLAMP_MIN)
    g = np.asarray(grad)[..., None] if target.ndim == 2 else grad
    log_t = np.log(np.where(target > 0.0, target, 1.0))
    # d/dt [t log(t/p)] = log(t/p) + 1 for t > 0; 0 by convention at t = 0.
    d_target = np.where(target > 0.0, log_t - np.log(clamped) + 1.0, 0.0) * g
    # log is flat below the clamp floor.
    d_pred = np.where(predicted > CLAMP_MIN, -target / clamped, 0.0) * g
    return [d_target, d_pred]


@dataclass(frozen=True)
class _Primitive:
    arity: int
    forward: Callable
    backward: Callable | None


PRIMITIVES: dict[str, _Primitive] = {
    "matmul": _Primitive(2, _fwd_matmul, _bwd_matmul),
    "add": _Primitive(2, _fwd_add, lambda g, ins, out: [g, g]),
    "sub": _Primitive(2, _fwd_sub, lambda g, ins, out: [g, -g]),
    "mul": _Primitive(2, _fwd_mul, lambda g, ins, out: [g * ins[1], g * ins[0]]),
    "scale": _Primitive(1, _fwd_scale, lambda g, ins, out, c: [g * float(c)]),
    "add_row": _Primitive(2, _fwd_add_row, lambda g, ins, out: [g, g.sum(axis=0)]),
    "transpose": _Primitive(1, _fwd_transpose, lambda g, ins, out: [g.T.copy()]),
    "gather": _Primitive(1, _fwd_gather, _bwd_gather),
    "bag_mean": _Primitive(1, _fwd_bag_mean, _bwd_bag_mean),
    "mean": _Primitive(1, _fwd_mean, _bwd_mean),
    "sum": _Primitive(1, _fwd_sum, _bwd_sum),
    "tanh": _Primitive(1, _fwd_tanh, _bwd_tanh),
    "log": _Primitive(1, _fwd_log, _bwd_log),
    "softmax": _Primitive(1, _fwd_softmax, _bwd_softmax),
    "kl_div": _Primitive(2, lambda t, p: _kl_forward(t, p), _bwd_kl_div),
}


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("op", "parents", "value", "kwargs", "needs_grad")

    def __init__(self, op, parents, value, kwargs, needs_grad):
        self.op = op
        self.parents = parents
        self.value = value
        self.kwargs = kwargs
        self.needs_grad = needs_grad


class Tape:
    """Append-only record of primitive applications, topologically ordered."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_index: dict[int, int] = {}   # id(tensor) -> node index
        self._leaf_tensors: dict[int, Tensor] = {}  # node index -> tensor

    def watch(self, *tensors: Tensor) -> None:
        """Register tensors as leaves so they get gradient entries even if unused."""
        for t in tensors:
            self._leaf(t)

    def _leaf(self, t: Tensor) -> int:
        idx = self._leaf_index.get(id(t))
        if idx is None:
            idx = len(self.nodes)
            self.nodes.append(_Node("leaf", (), t.data, {}, t.requires_grad))
            self._leaf_index[id(t)] = idx
            self._leaf_tensors[idx] = t
        return idx

    def apply_primitive(self, name: str, *inputs: Tensor, **kwargs) -> Tensor:
        """Apply a primitive, record it, and return the output tensor.

        Output values are checked finite; shape violations raise
        :class:`ShapeError` naming the primitive and the offending shapes.
        """
        prim = PRIMITIVES.get(name)
        if prim is None:
            raise TapeError(f"unknown primitive {name!r}; valid: {sorted(PRIMITIVES)}")
        if len(inputs) != prim.arity:
            raise TapeError(f"{name} expects {prim.arity} input(s), got {len(inputs)}")
        parent_ids = tuple(self._leaf(t) if t._node is None or t._node[0] is not self
                           else t._node[1]
                           for t in inputs)
        values = [self.nodes[i].value for i in parent_ids]
        out_value = prim.forward(*values, **kwargs)
        if not np.all(np.isfinite(out_value)):
            raise ValueError(f"{name}: non-finite output")
        needs = any(self.nodes[i].needs_grad for i in parent_ids)
        node = _Node(name, parent_ids, np.asarray(out_value), kwargs, needs)
        self.nodes.append(node)
        out = Tensor(node.value)
        out._node = (self, len(self.nodes) - 1)
        return out

    def constant(self, data) -> Tensor:
        """Wrap raw data as a non-trainable leaf on this tape."""
        t = Tensor(data, requires_grad=False)
        self._leaf(t)
        return t

    def replay(self) -> list[np.ndarray]:
        """Recompute every node forward from recorded leaf values.

        Returns the recomputed values; by the tape invariant these are
        bit-identical to the recorded ones.
        """
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "leaf":
                values.append(node.value)
            else:
                prim = PRIMITIVES[node.op]
                values.append(np.asarray(prim.forward(*(values[i] for i in node.parents),
                                                      **node.kwargs)))
        return values


def backprop(tape: Tape, loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, Tensor]:
    """Gradients of a scalar recorded loss for every trainable leaf on the tape.

    Leaves that do not influence the loss get zero gradients; ``params``
    entries absent from the tape get zeros of matching shape too.
    """
    if loss._node is None or loss._node[0] is not tape:
        raise TapeError("loss tensor was not produced by this tape")
    loss_idx = loss._node[1]
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {tuple(loss.data.shape)}")

    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss_idx] = np.ones_like(tape.nodes[loss_idx].value)
    for idx in range(loss_idx, -1, -1):
        node = tape.nodes[idx]
        g = grads[idx]
        if g is None or node.op == "leaf" or not node.needs_grad:
            continue
        prim = PRIMITIVES[node.op]
        input_values = [tape.nodes[i].value for i in node.parents]
        parent_grads = prim.backward(g, input_values, node.value, **node.kwargs)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not tape.nodes[parent].needs_grad:
                continue
            grads[parent] = pg if grads[parent] is None else grads[parent] + pg

    result: dict[str, Tensor] = {}
    for idx, tensor in tape._leaf_tensors.items():
        if not tensor.requires_grad:
            continue
        key = tensor.name if tensor.name is not None else f"leaf{idx}"
        g = grads[idx]
        result[key] = Tensor(g if g is not None else np.zeros_like(tensor.data))
    if params is not None:
        for name, tensor in params.items():
            result.setdefault(name, Tensor(np.zeros_like(tensor.data)))
    return result


def grad_check(build_loss: Callable[[dict[str, Tensor]], Tensor],
               params: dict[str, Tensor],
               eps: float = 1e-5) -> float:
    """Compare recorded gradients against central finite differences.

    ``build_loss`` must rebuild the scalar loss (on a fresh tape) from the
    current parameter values; it is called twice up front to verify
    determinism. Returns the worst relative error over every parameter
    coordinate, falling back to absolute error when both gradient magnitudes
    are below 1e-8.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"grad_check: eps must be in [1e-7, 1e-3], got {eps}")
    loss_a = build_loss(params)
    loss_b = build_loss(params)
    if not np.array_equal(loss_a.data, loss_b.data):
        raise TapeError("grad_check: loss builder is not deterministic")
    tape = loss_a._node[0]
    analytic = backprop(tape, loss_a, params=params)

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        got = analytic[name].data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            up = float(build_loss(params).data)
            flat[i] = saved - eps
            down = float(build_loss(params).data)
            flat[i] = saved
            fd = (up - down) / (2.0 * eps)
            scale = max(abs(got[i]), abs(fd))
            err = abs(got[i] - fd) if scale < 1e-8 else abs(got[i] - fd) / scale
            worst = max(worst, err)
    return worst
