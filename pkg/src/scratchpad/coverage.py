"""Coverage baseline: running attention sum, a score term, and an overlap penalty."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .attention import AttentionRecord, attend
from .config import ModelConfig
from .tensor import Tensor


@dataclass
class CoverageState:
    coverage: Tensor  # (B, n), sum of all earlier attention distributions
    steps: int = 0

    @classmethod
    def initial(cls, batch: int, length: int) -> CoverageState:
        return cls(Tensor(np.zeros((batch, length))), 0)


def coverage_update(state: CoverageState, distribution: Tensor) -> CoverageState:
    if state.coverage.shape != distribution.shape:
        raise T.ShapeError(
            f"coverage {state.coverage.shape} vs attention {distribution.shape}"
        )
    return CoverageState(T.add(state.coverage, distribution), state.steps + 1)


def coverage_loss(coverage: Tensor, distribution: Tensor) -> Tensor:
    """Per-row ``sum_t min(coverage_t, a_t)``; zero on the first step."""
    return T.tensor_sum(T.minimum(coverage, distribution), axis=-1)


def attend_with_coverage(
    s: Tensor,
    memory: Tensor,
    mask: np.ndarray | None,
    state: CoverageState,
    params: Mapping[str, Tensor],
    config: ModelConfig,
) -> AttentionRecord:
    """Attention whose scores gain ``w_cov * coverage_t`` per position."""
    extra = T.mul(state.coverage, params["coverage.w"])
    return attend(s, memory, mask, params, config, extra_scores=extra)
