"""Greedy and beam-search inference, with attention/write traces."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .memory import ScratchpadMemory
from .model import DecoderState, ModelParameters, decode_step, start


@dataclass
class Hypothesis:
    tokens: list[int]
    log_prob: float
    state: DecoderState
    memory: ScratchpadMemory
    finished: bool = False
    step_log_probs: list[float] = field(default_factory=list)
    attention: list[np.ndarray] = field(default_factory=list)
    gates: list[np.ndarray] = field(default_factory=list)

    @property
    def score(self) -> float:
        """Length-normalised log-probability."""
        return self.log_prob / max(len(self.tokens), 1)

    def output(self, eos_id: Optional[int]) -> list[int]:
        if eos_id is not None and self.tokens and self.tokens[-1] == eos_id:
            return self.tokens[:-1]
        return list(self.tokens)

    def attention_matrix(self) -> np.ndarray:
        return np.stack(self.attention) if self.attention else np.zeros((0, 0))

    def gate_matrix(self) -> Optional[np.ndarray]:
        return np.stack(self.gates) if self.gates else None


@dataclass
class DecodeResult:
    tokens: list[int]  # may end in EOS
    log_prob: float
    attention: np.ndarray  # (steps, n)
    gates: Optional[np.ndarray]  # (steps, n) or None for models without a write
    step_log_probs: list[float]
    nbest: list[Hypothesis] = field(default_factory=list)

    def output(self, eos_id: Optional[int]) -> list[int]:
        if eos_id is not None and self.tokens and self.tokens[-1] == eos_id:
            return self.tokens[:-1]
        return list(self.tokens)


def _source_ids(source) -> np.ndarray:
    ids = np.asarray(source, dtype=np.intp).reshape(1, -1)
    if ids.shape[1] == 0:
        raise ValueError("empty source")
    return ids


def _eos(params: ModelParameters, eos_id):
    return params.config.eos_id if eos_id == "default" else eos_id


def greedy_decode(
    source: Sequence[int],
    params: ModelParameters,
    max_len: int,
    eos_id: Optional[int] | str = "default",
) -> DecodeResult:
    """Feed back the argmax token until EOS or ``max_len`` tokens.

    ``eos_id=None`` disables early stopping.
    """
    eos_id = _eos(params, eos_id)
    with T.no_grad():
        state, memory, _ = start(_source_ids(source), params)
        prev = params.config.bos_id
        tokens, lps, att, gates = [], [], [], []
        total = 0.0
        for _ in range(max_len):
            state, memory, tr = decode_step(state, memory, [prev], params)
            row = tr.log_probs[0]
            tok = int(np.argmax(row))
            tokens.append(tok)
            lps.append(float(row[tok]))
            total += float(row[tok])
            att.append(tr.distribution[0].copy())
            if tr.write is not None:
                gates.append(tr.write.gates[0].copy())
            if eos_id is not None and tok == eos_id:
                break
            prev = tok
    return DecodeResult(
        tokens, total, np.stack(att), np.stack(gates) if gates else None, lps
    )


def _rank_key(h: Hypothesis):
    return (-h.score, -h.log_prob, tuple(h.tokens))


def beam_decode(
    source: Sequence[int],
    params: ModelParameters,
    beam: int = 4,
    max_len: int = 40,
    eos_id: Optional[int] | str = "default",
) -> DecodeResult:
    """Beam search where each hypothesis carries its own memory chain.

    Finished hypotheses stay in the pool and compete with live expansions on
    length-normalised log-probability; the search ends when the pool holds
    only finished hypotheses or after ``max_len`` steps.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    eos_id = _eos(params, eos_id)
    bos = params.config.bos_id
    with T.no_grad():
        state, memory, _ = start(_source_ids(source), params)
        pool = [Hypothesis([], 0.0, state, memory)]
        for step in range(max_len):
            live = [h for h in pool if not h.finished]
            if not live:
                break
            candidates = [h for h in pool if h.finished]
            for h in live:
                prev = h.tokens[-1] if h.tokens else bos
                st, mem, tr = decode_step(h.state, h.memory, [prev], params)
                row = tr.log_probs[0]
                att = tr.distribution[0].copy()
                gate = tr.write.gates[0].copy() if tr.write is not None else None
                last = step + 1 == max_len
                for v in range(row.shape[0]):
                    lp = float(row[v])
                    candidates.append(Hypothesis(
                        h.tokens + [v],
                        h.log_prob + lp,
                        st,
                        mem,
                        finished=last or (eos_id is not None and v == eos_id),
                        step_log_probs=h.step_log_probs + [lp],
                        attention=h.attention + [att],
                        gates=h.gates + ([gate] if gate is not None else []),
                    ))
            candidates.sort(key=_rank_key)
            pool = candidates[:beam]
    for h in pool:
        h.finished = True
    pool.sort(key=_rank_key)
    best = pool[0]
    return DecodeResult(
        list(best.tokens), best.log_prob, best.attention_matrix(), best.gate_matrix(),
        list(best.step_log_probs), nbest=pool,
    )


def sequence_log_prob(source: Sequence[int], tokens: Sequence[int], params: ModelParameters) -> float:
    """Score a fixed output by forcing it through the decoder one step at a time."""
    with T.no_grad():
        state, memory, _ = start(_source_ids(source), params)
        prev = params.config.bos_id
        total = 0.0
        for tok in tokens:
            state, memory, tr = decode_step(state, memory, [prev], params)
            total += float(tr.log_probs[0][tok])
            prev = tok
    return total


def decode(source, params: ModelParameters, beam: int, max_len: int, greedy: bool = False) -> DecodeResult:
    if greedy:
        return greedy_decode(source, params, max_len)
    return beam_decode(source, params, beam, max_len)
