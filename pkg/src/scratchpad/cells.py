"""GRU/LSTM cells, the (bi)directional stacked encoder and the decoder stack."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import Tensor


@dataclass
class CellState:
    hidden: Tensor
    cell: Optional[Tensor] = None
    # numpy copies of the gate activations of the step that produced this state
    gates: dict = field(default_factory=dict)


@dataclass
class EncoderOutputs:
    states: Tensor  # (B, n, d_enc), top layer
    mask: np.ndarray  # (B, n) bool, True on real tokens
    final_forward: CellState
    final_backward: Optional[CellState] = None

    def __len__(self) -> int:
        return self.states.shape[1]


def gru_step(x: Tensor, prev: CellState, params: Mapping[str, Tensor]) -> CellState:
    """One GRU step: ``h' = z*h + (1-z)*n`` with ``n = tanh(Wn x + r*(Un h) + b)``.

    ``params`` holds ``w_x`` (d_in, 3d), ``w_h`` (d, 3d) and ``b`` (3d) with the
    gate blocks ordered update, reset, candidate.
    """
    h = prev.hidden
    d = h.shape[-1]
    w_x, w_h, b = params["w_x"], params["w_h"], params["b"]
    if w_x.shape != (x.shape[-1], 3 * d) or w_h.shape != (d, 3 * d):
        raise T.ShapeError(f"gru_step: x {x.shape}, h {h.shape}, w_x {w_x.shape}, w_h {w_h.shape}")
    gx = T.linear(x, w_x, b)
    gh = T.matmul(h, w_h)
    z = T.sigmoid(T.slice_last(gx, 0, d) + T.slice_last(gh, 0, d))
    r = T.sigmoid(T.slice_last(gx, d, 2 * d) + T.slice_last(gh, d, 2 * d))
    n = T.tanh(T.slice_last(gx, 2 * d, 3 * d) + r * T.slice_last(gh, 2 * d, 3 * d))
    new = n + z * (h - n)
    return CellState(new, gates={"update": z.data, "reset": r.data})


def lstm_step(x: Tensor, prev: CellState, params: Mapping[str, Tensor]) -> CellState:
    """One LSTM step with gate blocks ordered input, forget, candidate, output."""
    h, c = prev.hidden, prev.cell
    d = h.shape[-1]
    w_x, w_h, b = params["w_x"], params["w_h"], params["b"]
    if w_x.shape != (x.shape[-1], 4 * d) or w_h.shape != (d, 4 * d):
        raise T.ShapeError(f"lstm_step: x {x.shape}, h {h.shape}, w_x {w_x.shape}, w_h {w_h.shape}")
    pre = T.linear(x, w_x, b) + T.matmul(h, w_h)
    i = T.sigmoid(T.slice_last(pre, 0, d))
    f = T.sigmoid(T.slice_last(pre, d, 2 * d))
    g = T.tanh(T.slice_last(pre, 2 * d, 3 * d))
    o = T.sigmoid(T.slice_last(pre, 3 * d, 4 * d))
    c_new = f * c + i * g
    h_new = o * T.tanh(c_new)
    return CellState(h_new, c_new, gates={"input": i.data, "forget": f.data, "output": o.data})


def zero_state(batch: int, width: int, cell: str) -> CellState:
    h = Tensor(np.zeros((batch, width)))
    return CellState(h, Tensor(np.zeros((batch, width))) if cell == "lstm" else None)


def cell_step(kind: str, x: Tensor, prev: CellState, params: Mapping[str, Tensor]) -> CellState:
    return gru_step(x, prev, params) if kind == "gru" else lstm_step(x, prev, params)


def _hold(new: CellState, prev: CellState, keep: np.ndarray) -> CellState:
    """Keep ``prev`` on rows where ``keep`` is False (padding)."""
    if keep.all():
        return new
    m = Tensor(np.repeat(keep[:, None].astype(float), new.hidden.shape[-1], axis=1))
    h = new.hidden * m + prev.hidden * (1.0 - m)
    c = None
    if new.cell is not None:
        c = new.cell * m + prev.cell * (1.0 - m)
    return CellState(h, c, gates=new.gates)


def _sub(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def run_direction(
    inputs: list[Tensor],
    mask: np.ndarray,
    params: Mapping[str, Tensor],
    kind: str,
    width: int,
    reverse: bool = False,
) -> tuple[list[Tensor], CellState]:
    """Unroll one cell over ``inputs``; padded steps leave the state untouched."""
    batch = inputs[0].shape[0]
    state = zero_state(batch, width, kind)
    outs: list[Optional[Tensor]] = [None] * len(inputs)
    order = range(len(inputs) - 1, -1, -1) if reverse else range(len(inputs))
    for t in order:
        state = _hold(cell_step(kind, inputs[t], state, params), state, mask[:, t])
        outs[t] = state.hidden
    return outs, state


def encode(
    source,
    params: Mapping[str, Tensor],
    config: ModelConfig,
    mask: np.ndarray | None = None,
    rng=None,
    training: bool = False,
) -> EncoderOutputs:
    """Embed and encode a batch of right-padded source ids of shape (B, n).

    A flat list of ids is treated as a batch of one.
    """
    ids = np.asarray(source, dtype=np.intp)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.shape[1] == 0:
        raise ValueError("cannot encode an empty source sequence")
    if mask is None:
        mask = np.ones(ids.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask[:, 0].all():
        raise ValueError("every source sequence needs at least one token")
    n = ids.shape[1]
    layer_in = [T.embedding_lookup(params["src_embed"], ids[:, t]) for t in range(n)]
    fwd_final = bwd_final = None
    outs: list[Tensor] = []
    for layer in range(config.enc_layers):
        if layer > 0:
            layer_in = [
                T.dropout(x, config.dropout, _gen(rng, "enc", layer, t), training)
                for t, x in enumerate(outs)
            ]
        fwd, fwd_final = run_direction(
            layer_in, mask, _sub(params, f"enc.l{layer}.fwd."), config.cell, config.hidden
        )
        if config.bidirectional:
            bwd, bwd_final = run_direction(
                layer_in, mask, _sub(params, f"enc.l{layer}.bwd."), config.cell,
                config.hidden, reverse=True,
            )
            outs = [T.concat([f, b], axis=-1) for f, b in zip(fwd, bwd)]
        else:
            outs = fwd
    states = T.stack(outs, axis=1)
    return EncoderOutputs(states, mask, fwd_final, bwd_final)


def _gen(rng, *names):
    return None if rng is None else rng.child(*names).generator


def init_decoder_state(
    enc: EncoderOutputs, params: Mapping[str, Tensor], config: ModelConfig
) -> list[CellState]:
    """Project the encoder's final state(s) to the decoder width, once per layer."""
    parts = [enc.final_forward.hidden]
    if enc.final_backward is not None:
        parts.append(enc.final_backward.hidden)
    joined = parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)
    s0 = T.tanh(T.linear(joined, params["bridge.w"], params["bridge.b"]))
    batch = s0.shape[0]
    states = []
    for _ in range(config.dec_layers):
        c0 = Tensor(np.zeros((batch, config.dec_hidden))) if config.cell == "lstm" else None
        states.append(CellState(s0, c0))
    return states


def decoder_stack_step(
    x: Tensor,
    states: list[CellState],
    params: Mapping[str, Tensor],
    config: ModelConfig,
    rng=None,
    training: bool = False,
) -> tuple[Tensor, list[CellState]]:
    """Advance every decoder layer once; returns the top output and new states.

    Layers above the first optionally add their input back and layer-normalise.
    """
    new_states = []
    inp = x
    out = x
    for layer, prev in enumerate(states):
        if layer > 0:
            inp = T.dropout(out, config.dropout, _gen(rng, "dec", layer), training)
        st = cell_step(config.cell, inp, prev, _sub(params, f"dec.l{layer}."))
        new_states.append(st)
        out = st.hidden
        if layer > 0 and config.residual:
            out = T.layer_norm(
                out + inp, params[f"dec.l{layer}.ln.gain"], params[f"dec.l{layer}.ln.bias"]
            )
    return out, new_states
