"""The scratchpad: encoder outputs treated as a memory the decoder rewrites.

After each output step every memory position is replaced by a convex
combination of its old value and one shared update vector::

    h_t <- alpha_t * h_t + (1 - alpha_t) * u
    alpha_t = sigmoid(f_alpha([s, c, h_t]))
    u = tanh(f_u([s; c]))

``alpha_t`` is the fraction kept. Both ``f_alpha`` and ``f_u`` are one-hidden-layer
tanh perceptrons. Versions are never mutated in place; each write puts a fresh
(B, n, d) tensor on the tape so gradients flow back into the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor


class MemoryRangeError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ScratchpadMemory:
    states: Tensor  # (B, n, d)
    mask: np.ndarray  # (B, n) bool
    version: int = 0

    @property
    def length(self) -> int:
        return self.states.shape[1]

    def check_range(self) -> None:
        worst = float(np.abs(self.states.data).max())
        if not worst <= 1.0:
            raise MemoryRangeError(f"memory version {self.version} leaves [-1, 1]: |h| = {worst!r}")


@dataclass
class WriteRecord:
    gates: np.ndarray  # (B, n), fraction of each position kept
    update: np.ndarray  # (B, d)


def compute_update(s_next: Tensor, context: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Global update ``tanh(f_u([s; c]))`` of shape (B, d_mem)."""
    joined = T.concat([s_next, context], axis=-1)
    hidden = T.tanh(T.linear(joined, params["pad.update.w1"], params["pad.update.b1"]))
    return T.tanh(T.linear(hidden, params["pad.update.w2"], params["pad.update.b2"]))


def compute_gate(
    s_next: Tensor, context: Tensor, memory: Tensor, params: Mapping[str, Tensor]
) -> Tensor:
    """Keep-probability per memory position, shape (B, n).

    The first layer of ``f_alpha`` is stored as two blocks (query part and
    memory part) so the query half is computed once and shared by all n
    positions; the result equals one matrix over ``[s, c, h_t]``.
    """
    b, n, _ = memory.shape
    query = T.linear(
        T.concat([s_next, context], axis=-1), params["pad.gate.w_query"], params["pad.gate.b"]
    )
    hidden = T.tanh(T.expand(query, 1, n) + T.matmul(memory, params["pad.gate.w_memory"]))
    logit = T.linear(hidden, params["pad.gate.w_out"], params["pad.gate.b_out"])
    return T.sigmoid(T.reshape(logit, (b, n)))


def blend(states: Tensor, gates: Tensor, update: Tensor) -> Tensor:
    """``gates * states + (1 - gates) * update`` with gates (B, n) and update (B, d)."""
    b, n, d = states.shape
    keep = T.expand(gates, -1, d)
    return keep * states + (1.0 - keep) * T.expand(update, 1, n)


def write(
    memory: ScratchpadMemory,
    s_next: Tensor,
    context: Tensor,
    params: Mapping[str, Tensor],
    pin_gates: bool = False,
    check_range: bool = True,
) -> tuple[ScratchpadMemory, WriteRecord]:
    """Produce the next memory version.

    With ``pin_gates`` every gate is exactly 1, which leaves the memory
    bit-for-bit unchanged; the update is still computed so the parameter set
    matches an unpinned model.
    """
    update = compute_update(s_next, context, params)
    if pin_gates:
        gates = Tensor(np.ones(memory.states.shape[:2]))
    else:
        gates = compute_gate(s_next, context, memory.states, params)
    new = ScratchpadMemory(blend(memory.states, gates, update), memory.mask, memory.version + 1)
    if check_range:
        new.check_range()
    return new, WriteRecord(gates.data, update.data)
