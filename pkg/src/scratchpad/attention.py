"""Attention scores, distribution and attentive read; Luong-style combination."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import Tensor


@dataclass
class AttentionRecord:
    scores: Tensor  # (B, n)
    distribution: Tensor  # (B, n)
    context: Tensor  # (B, d_enc)


def mlp_scores(s: Tensor, memory: Tensor, w1: Tensor, w2: Tensor, hidden_tanh: bool = False) -> Tensor:
    """``W1 (W2 [s, h_t])`` for every memory position.

    ``s`` is (B, d_s), ``memory`` (B, n, d_h), ``w2`` (d_s + d_h, A) and ``w1`` (A, 1).
    No activation sits between the two maps unless ``hidden_tanh`` is set.
    """
    b, n, d_h = memory.shape
    if w2.shape[0] != s.shape[-1] + d_h or w1.shape != (w2.shape[1], 1):
        raise T.ShapeError(
            f"mlp score: s {s.shape}, memory {memory.shape}, w2 {w2.shape}, w1 {w1.shape}"
        )
    joined = T.concat([T.expand(s, 1, n), memory], axis=-1)
    hidden = T.matmul(joined, w2)
    if hidden_tanh:
        hidden = T.tanh(hidden)
    return T.reshape(T.matmul(hidden, w1), (b, n))


def general_scores(s: Tensor, memory: Tensor, w_general: Tensor) -> Tensor:
    """``s^T W h_t`` for every memory position."""
    b, n, d_h = memory.shape
    if w_general.shape != (s.shape[-1], d_h):
        raise T.ShapeError(f"general score: s {s.shape}, memory {memory.shape}, W {w_general.shape}")
    query = T.matmul(s, w_general)
    return T.tensor_sum(memory * T.expand(query, 1, n), axis=-1)


def score_mlp(s: Tensor, h: Tensor, w1: Tensor, w2: Tensor, hidden_tanh: bool = False) -> Tensor:
    """Scalar score of one decoder state against one memory state."""
    out = mlp_scores(T.reshape(s, (1, -1)), T.reshape(h, (1, 1, -1)), w1, w2, hidden_tanh)
    return T.reshape(out, ())


def score_general(s: Tensor, h: Tensor, w_general: Tensor) -> Tensor:
    out = general_scores(T.reshape(s, (1, -1)), T.reshape(h, (1, 1, -1)), w_general)
    return T.reshape(out, ())


def compute_scores(s: Tensor, memory: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    if config.score == "general":
        return general_scores(s, memory, params["attn.w_general"])
    return mlp_scores(s, memory, params["attn.w1"], params["attn.w2"], config.mlp_score_tanh)


def read(distribution: Tensor, memory: Tensor) -> Tensor:
    """Attentive read: the distribution-weighted sum of memory states."""
    d = memory.shape[-1]
    return T.tensor_sum(T.expand(distribution, -1, d) * memory, axis=1)


def attend(
    s: Tensor,
    memory: Tensor,
    mask: np.ndarray | None,
    params: Mapping[str, Tensor],
    config: ModelConfig,
    extra_scores: Tensor | None = None,
) -> AttentionRecord:
    """Score every position, normalise under ``mask`` and read.

    ``extra_scores`` (B, n) is added before normalisation; the coverage
    baseline uses it for its per-position term.
    """
    if memory.shape[1] == 0:
        raise ValueError("attention over an empty memory")
    scores = compute_scores(s, memory, params, config)
    if extra_scores is not None:
        scores = scores + extra_scores
    dist = T.softmax(scores, mask)
    return AttentionRecord(scores, dist, read(dist, memory))


def combine(s: Tensor, context: Tensor, w_combine: Tensor) -> Tensor:
    """Attentional state ``tanh(W_c [c; s])``."""
    joined = T.concat([context, s], axis=-1)
    if w_combine.shape[0] != joined.shape[-1]:
        raise T.ShapeError(f"combine: input width {joined.shape[-1]} vs W_c {w_combine.shape}")
    return T.tanh(T.matmul(joined, w_combine))
