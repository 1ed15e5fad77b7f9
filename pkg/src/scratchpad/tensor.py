"""Dense float64 tensors with a reverse-mode tape.

Every differentiable operation in the toolkit is one of the primitives below.
Each primitive computes its output with numpy and, when any input requires a
gradient and recording is enabled, attaches a node holding the inputs and a
closure mapping the output gradient to input gradients.

Broadcasting is deliberately narrow: an operand is either a Python number, a
shape-``()`` tensor, or a tensor of exactly the same shape. Anything wider is
spelled out with :func:`expand` so gradient routing stays explicit.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_sequence = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run the block without recording anything on the tape."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class _Node:
    __slots__ = ("seq", "inputs", "backward", "op")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.seq = next(_sequence)
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.array(arr, order="C")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        if exponent != 2:
            raise NotImplementedError("only squaring is supported")
        return mul(self, self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = _Node(op, inputs, backward)
    else:
        out.requires_grad = False
        out.node = None
    return out


# ---------------------------------------------------------------------------
# tape and backward pass


class Tape:
    """Recorded operations reachable from a loss, in creation order."""

    def __init__(self, tensors: list[Tensor]):
        self.tensors = tensors

    @classmethod
    def from_output(cls, output: Tensor) -> Tape:
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t.node.inputs)
        found.sort(key=lambda t: t.node.seq)
        return cls(found)

    def __len__(self) -> int:
        return len(self.tensors)

    def ops(self) -> list[str]:
        return [t.node.op for t in self.tensors]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor that needs it."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError(f"loss is not finite: {loss.data!r}")
    if not loss.requires_grad:
        return
    if loss.node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    tape = Tape.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.tensors):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        for inp, gi in zip(t.node.inputs, t.node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi


# ---------------------------------------------------------------------------
# elementwise


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=DTYPE).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def back(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def back(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def back(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), back)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, "scale", (x,), lambda g: (g * c,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    y = np.empty_like(z)
    pos = z >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    y[~pos] = ez / (1.0 + ez)
    return _make(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, "exp", (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = _binary_operands(a, b, "minimum")
    take_a = a.data <= b.data

    def back(g):
        return _reduce_to(np.where(take_a, g, 0.0), a.shape), _reduce_to(
            np.where(take_a, 0.0, g), b.shape
        )

    return _make(np.minimum(a.data, b.data), "minimum", (a, b), back)


def elementwise(op: str, *args) -> Tensor:
    table = {
        "add": add,
        "sub": sub,
        "mul": mul,
        "tanh": tanh,
        "sigmoid": sigmoid,
        "scale": scale,
        "exp": exp,
        "log": log,
        "minimum": minimum,
    }
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*args)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., k) and ``b`` of shape (k, n)."""
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    k, n = b.shape

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with the bias shared across leading axes."""
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    k, n = weight.shape
    out = x.data @ weight.data
    if bias is None:
        return _make(out, "linear", (x, weight), lambda g: (
            g @ weight.data.T if x.requires_grad else None,
            x.data.reshape(-1, k).T @ g.reshape(-1, n) if weight.requires_grad else None,
        ))
    if bias.shape != (n,):
        raise ShapeError(f"linear: bias {bias.shape} does not match width {n}")

    def back(g):
        g2 = g.reshape(-1, n)
        return (
            g @ weight.data.T if x.requires_grad else None,
            x.data.reshape(-1, k).T @ g2 if weight.requires_grad else None,
            g2.sum(axis=0) if bias.requires_grad else None,
        )

    return _make(out + bias.data, "linear", (x, weight, bias), back)


# ---------------------------------------------------------------------------
# normalisation


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` marks the entries allowed to carry mass."""
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ShapeError(f"softmax: mask {mask.shape} vs input {z.shape}")
        if not mask.any(axis=-1).all():
            raise ValueError("softmax: every entry of a row is masked")
        z = np.where(mask, z, -np.inf)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, "softmax", (x,), back)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse

    def back(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make(y, "log_softmax", (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then gain and bias."""
    d = x.shape[-1]
    if d < 2 or gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        lead = g.reshape(-1, d)
        ggain = (lead * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None
        gbias = lead.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggain, gbias

    return _make(xhat * gain.data + bias.data, "layer_norm", (x, gain, bias), back)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so evaluation is identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# shape manipulation


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat of nothing")
    ndim = parts[0].ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.ndim != ndim or any(
            p.shape[i] != parts[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {[q.shape for q in parts]} disagree off axis {axis}")
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def back(g):
        out = []
        for i, p in enumerate(parts):
            idx = [slice(None)] * ndim
            idx[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)] if p.requires_grad else None)
        return out

    return _make(np.concatenate([p.data for p in parts], axis=ax), "concat", tuple(parts), back)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    shape = parts[0].shape
    if any(p.shape != shape for p in parts):
        raise ShapeError(f"stack: shapes differ {[p.shape for p in parts]}")

    def back(g):
        return [np.take(g, i, axis=axis) if p.requires_grad else None for i, p in enumerate(parts)]

    return _make(np.stack([p.data for p in parts], axis=axis), "stack", tuple(parts), back)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[..., start:stop]``."""

    def back(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _make(x.data[..., start:stop].copy(), "slice", (x,), back)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def expand(x: Tensor, axis: int, size: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``x`` ``size`` times along it."""
    y = np.repeat(np.expand_dims(x.data, axis), size, axis=axis)
    return _make(y, "expand", (x,), lambda g: (g.sum(axis=axis),))


def tensor_sum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _make(
            np.asarray(x.data.sum(), dtype=DTYPE), "sum", (x,),
            lambda g: (np.full_like(x.data, g),),
        )

    def back(g):
        return (np.repeat(np.expand_dims(g, axis), x.shape[axis], axis=axis),)

    return _make(x.data.sum(axis=axis), "sum", (x,), back)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather along axis 0; gradients scatter back additively."""
    index = np.asarray(index, dtype=np.intp)

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], "take_rows", (x,), back)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[...] = x[..., index[...]]``: select one entry of the last axis per row."""
    index = np.asarray(index, dtype=np.intp)
    if index.shape != x.shape[:-1]:
        raise ShapeError(f"pick: index {index.shape} vs rows {x.shape[:-1]}")
    expanded = index[..., None]

    def back(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, expanded, g[..., None], axis=-1)
        return (full,)

    return _make(
        np.take_along_axis(x.data, expanded, axis=-1)[..., 0], "pick", (x,), back
    )


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab}): {ids.min()}..{ids.max()}")
    d = table.shape[1]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, d))
        return (full,)

    return _make(table.data[ids], "embedding", (table,), back)


def check_finite(tensors: Iterable[Tensor], what: str = "tensor") -> None:
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{what} {t.name or t!r} has non-finite values")
