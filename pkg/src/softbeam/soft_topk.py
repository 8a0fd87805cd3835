"""Continuous relaxation of top-k-argmax.

For a candidate score matrix ``s`` (any trailing shape, flattened), matrix
``p_i`` is the peaked softmax of ``-(s - m_i)^2`` where ``m_i`` is the i-th
largest score.  Row sums of ``p_i`` give a soft backpointer, column sums a
soft label choice.  With ``detach_max=True`` the ``m_i`` are treated as
constants during backward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError


@dataclass
class SelectionMatrices:
    """``p`` holds the k matrices stacked on a leading axis: ``[..., k, rows, cols]``."""

    p: Tensor
    alpha: float
    hard_index: np.ndarray  # flat index of the i-th max, [..., k]

    def __len__(self):
        return self.p.shape[-3]

    def __getitem__(self, i: int) -> Tensor:
        return self.p[..., i, :, :]


def peaked_selection(scores: Tensor, k: int, alpha: float, detach_max: bool = False):
    """Batched core: ``scores [..., n]`` -> (``P [..., k, n]``, hard indices ``[..., k]``)."""
    if not alpha > 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    if not np.all(np.isfinite(scores.data)):
        raise NumericError("continuous_top_k_argmax on non-finite scores")
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ContractError(f"k={k} must lie in [1, {n}]")
    m, idx = ad.topk(scores, k)
    if detach_max:
        m = m.detach()
    lead = scores.shape[:-1]
    full = lead + (k, n)
    s_rep = ad.expand(ad.reshape(scores, lead + (1, n)), full)
    m_rep = ad.expand(ad.reshape(m, lead + (k, 1)), full)
    P = ad.softmax_scaled(ad.neg(ad.square(s_rep - m_rep)), alpha)
    return P, idx


def continuous_top_k_argmax(s, k: int, alpha: float, detach_max: bool = False) -> SelectionMatrices:
    """k peaked matrices over the entries of the score matrix ``s [rows, cols]``."""
    s = ad._lift(s)
    if s.ndim != 2:
        raise ContractError("expected a score matrix")
    rows, cols = s.shape
    P, idx = peaked_selection(ad.reshape(s, (rows * cols,)), k, alpha, detach_max)
    return SelectionMatrices(ad.reshape(P, (k, rows, cols)), alpha, idx)


def soft_backpointer(p_i: Tensor) -> Tensor:
    """b~ = row_sum(p_i): each previous beam element's share."""
    return ad.row_sum(p_i)


def vocab_contribution(p_i: Tensor) -> Tensor:
    """a = column_sum(p_i): each label's share."""
    return ad.column_sum(p_i)
