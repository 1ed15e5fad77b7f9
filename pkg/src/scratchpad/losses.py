from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def label_smoothed_nll(
    logits: Tensor, gold, epsilon: float = 0.1, mask: np.ndarray | None = None
) -> Tensor:
    """Mean cross-entropy against ``(1 - eps) * onehot(gold) + eps / V``.

    ``logits`` is (..., V) and ``gold`` the matching integer array; positions
    where ``mask`` is False do not count, in the sum or in the divisor.
    """
    gold = np.asarray(gold, dtype=np.intp)
    vocab = logits.shape[-1]
    if gold.size and (gold.min() < 0 or gold.max() >= vocab):
        raise IndexError(f"gold id outside vocabulary of size {vocab}")
    logp = T.log_softmax(logits)
    nll = T.scale(T.pick(logp, gold), -1.0)
    if epsilon:
        smooth = T.scale(T.tensor_sum(logp, axis=-1), -1.0 / vocab)
        per_token = T.add(T.scale(nll, 1.0 - epsilon), T.scale(smooth, epsilon))
    else:
        per_token = nll
    return masked_mean(per_token, mask)


def masked_mean(values: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return T.scale(T.tensor_sum(values), 1.0 / values.data.size)
    mask = np.asarray(mask, dtype=float)
    count = mask.sum()
    if count == 0:
        raise ValueError("mean over an empty mask")
    return T.scale(T.tensor_sum(T.mul(values, Tensor(mask))), 1.0 / count)
