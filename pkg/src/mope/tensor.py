"""Dense numpy tensors with a reverse-mode autodiff tape.

Only the primitives the transformer and its training loops need are provided.
Every op materializes its output; there are no views or fused kernels.

A :class:`Tape` owns the trainable leaves created through :meth:`Tape.param`.
Ops whose inputs carry no gradient run eagerly without recording anything,
so inference pays no bookkeeping cost.

    tape = Tape()
    w = tape.param("w", np.ones((3, 2), dtype=np.float32))
    loss = sum_all(matmul(Tensor(x), w))
    grads = backward(tape, loss)     # {"w": array of shape (3, 2)}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DTYPE = np.float32
# large finite negative keeps masked logits finite while driving exp() to zero
MASK_VALUE = -1e9


def _as_array(data) -> np.ndarray:
    # float64 arrays are kept as-is so gradient checks can run the same code in 64 bits
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data
    return np.asarray(data, dtype=DTYPE)


class Tensor:
    """Immutable array value, optionally tracked by a tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: Tape | None = None, node_id: int = -1):
        self.data = _as_array(data)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive ops; node ids are positions in ``nodes``."""

    nodes: list[_Node | None] = field(default_factory=list)
    params: dict[int, str] = field(default_factory=dict)
    leaves: dict[int, Tensor] = field(default_factory=dict)

    def param(self, name: str, data) -> Tensor:
        if name in self.params.values():
            raise ContractError(f"parameter {name!r} already registered on this tape")
        node_id = len(self.nodes)
        self.nodes.append(None)  # leaves have no vjp
        self.params[node_id] = name
        leaf = Tensor(data, self, node_id)
        self.leaves[node_id] = leaf
        return leaf

    def record(self, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
        node_id = len(self.nodes)
        self.nodes.append(_Node(inputs, vjp))
        return Tensor(out, self, node_id)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("tensors from different tapes cannot be combined")
            tape = t.tape
    return tape


def _emit(out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(out, inputs, vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _emit(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _emit(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    a = _wrap(a)
    c = a.data.dtype.type(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = _wrap(x)
    v = x.data
    dt = v.dtype.type
    v2 = v * v  # explicit products; float32 ** is slow
    inner = dt(_GELU_C) * v * (dt(1) + dt(0.044715) * v2)
    th = np.tanh(inner)
    out = dt(0.5) * v * (dt(1) + th)

    def vjp(g):
        dinner = dt(_GELU_C) * (dt(1) + dt(3 * 0.044715) * v2)
        local = dt(0.5) * (dt(1) + th) + dt(0.5) * v * (dt(1) - th * th) * dinner
        return (g * local,)

    return _emit(out, (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    x = _wrap(x)
    shape = x.shape
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    return _emit(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


# --- structural ------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _wrap(x)
    old = x.shape
    try:
        out = x.data.reshape(shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {shape}") from exc
    return _emit(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    x = _wrap(x)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _emit(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _wrap(x)
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {old} to {shape}") from exc
    return _emit(out, (x,), lambda g: (_unbroadcast(g, old),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _emit(out, tensors, vjp)


def embedding(table: Tensor, ids) -> Tensor:
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def vjp(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _emit(out, (table,), vjp)


# --- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit(out, (a, b), vjp)


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (x,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    v = x.data
    dt = v.dtype.type
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = dt(1) / np.sqrt(var + dt(eps))
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx = gg = gb = None
        if x.requires_grad:
            gxhat = g * gain.data
            gx = inv * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        return gx, gg, gb

    return _emit(out, (x, gain, bias), vjp)


def cross_entropy(logits, targets, mask) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``mask`` is 1.

    ``logits`` has shape ``(..., V)``; ``targets`` and ``mask`` have the leading shape.
    """
    logits = _wrap(logits)
    vocab = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask)
    lead = logits.shape[:-1]
    if targets.shape != lead or mask.shape != lead:
        raise ShapeError(
            f"targets {targets.shape} / mask {mask.shape} do not match logits {logits.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of range for vocabulary of size {vocab}")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("cross_entropy needs at least one masked-in position")

    dt = logits.data.dtype
    flat = logits.data.reshape(-1, vocab)
    t = targets.reshape(-1)
    m = mask.reshape(-1).astype(dt)
    shifted = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = shifted[np.arange(t.size), t]
    nll = lse - picked
    out = np.asarray((nll * m).sum() / dt.type(count), dtype=dt)

    def vjp(g):
        probs = np.exp(shifted - lse[:, None])
        probs[np.arange(t.size), t] -= 1
        probs *= (m * (g / dt.type(count)))[:, None]
        return (probs.reshape(logits.shape),)

    return _emit(out, (logits,), vjp)


# --- reverse pass ----------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` w.r.t. every parameter registered on ``tape``.

    Accumulators start at zero on each call. Parameters that the loss does not
    depend on get a zero gradient; constants never appear in the result.
    """
    if loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    result: dict[str, np.ndarray] = {}
    for node_id in range(loss.node_id, -1, -1):
        g = grads.pop(node_id, None)
        if g is None:
            continue
        node = tape.nodes[node_id]
        if node is None:
            result[tape.params[node_id]] = g
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or inp.tape is None:
                continue
            if inp.node_id in grads:
                grads[inp.node_id] = grads[inp.node_id] + gi
            else:
                grads[inp.node_id] = gi

    for node_id, name in tape.params.items():
        if name not in result:
            result[name] = np.zeros_like(tape.leaves[node_id].data)
    return result
