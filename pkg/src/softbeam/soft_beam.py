"""Differentiable beam search.

The soft beam keeps, per sentence, ``n`` elements with a decoder state, a
cumulative score ``s`` and a cumulative soft loss ``D``.  One step:

1. candidate scores ``s~[i, w] = s_i + f(h_i, w)`` (plus ``d(w)`` for the hinge)
2. ``p_1..p_n' = continuous_top_k_argmax(s~)``
3. ``b~_i = row_sum(p_i)``, ``a_i = column_sum(p_i)``
4. ``e_i = a_i E``, ``D_i = a_i . D~ + b~_i . D``, ``s_i = sum(s~ * p_i)``
5. ``state_i = r(b~_i . state, e_i)``

The whole LSTM state (hidden vector and memory cell) is mixed by the soft
backpointers.  As in :mod:`softbeam.hard_beam`, the beam starts from one
element and widens to k.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .costs import CostFunction, direct_loss  # noqa: F401
from .errors import ContractError, InputError
from .hard_beam import DecodeResult
from .model import (
    EncodedInput,
    TaggerModel,
    encode,
    initial_state,
    recur_from_state,
    scores_from_state,
    sequence_score,
)
from .soft_topk import peaked_selection


@dataclass
class SoftBeamTrace:
    scores: list[Tensor] = field(default_factory=list)
    losses: list[Tensor] = field(default_factory=list)
    backpointers: list[Tensor] = field(default_factory=list)
    contributions: list[Tensor] = field(default_factory=list)
    map_backpointers: list[np.ndarray] = field(default_factory=list)
    map_labels: list[np.ndarray] = field(default_factory=list)


def _check_args(k, alpha):
    if k < 1:
        raise ContractError(f"beam size must be >= 1, got {k}")
    if not alpha > 0:
        raise ContractError(f"alpha must be positive, got {alpha}")


def run_soft_beam(
    enc: EncodedInput,
    model: TaggerModel,
    k: int,
    alpha: float,
    local_costs: np.ndarray | None = None,
    augment: np.ndarray | None = None,
    detach_max: bool = False,
    trace: SoftBeamTrace | None = None,
) -> tuple[Tensor, Tensor | None]:
    """Unroll the soft beam over an encoded batch.

    ``local_costs`` (``[B, T, V]``) drives the soft loss accumulator; ``augment``
    (same shape) is added to the candidate scores.  Returns the final scores
    ``[B, n]`` and, when costs are given, the final soft losses ``[B, n]``.
    """
    _check_args(k, alpha)
    B, T = enc.batch, enc.length
    V = model.sizes.n_labels
    dtype = enc.context.dtype
    E = model["label_emb"][:V]
    state = ad.reshape(initial_state(enc, model), (B, 1, -1))
    s = Tensor(np.zeros((B, 1), dtype=dtype))
    D = Tensor(np.zeros((B, 1), dtype=dtype)) if local_costs is not None else None
    for t in range(T):
        n = s.shape[1]
        local = scores_from_state(state, enc.score_ctx[:, t, :], model)
        if augment is not None:
            local = local + Tensor(np.broadcast_to(augment[:, t, None, :], local.shape).astype(dtype))
        cand = ad.expand(ad.reshape(s, (B, n, 1)), (B, n, V)) + local
        flat = ad.reshape(cand, (B, n * V))
        n_next = min(k, n * V)
        P, _ = peaked_selection(flat, n_next, alpha, detach_max)
        P4 = ad.reshape(P, (B, n_next, n, V))
        back = ad.row_sum(P4)  # [B, n', n]
        contrib = ad.column_sum(P4)  # [B, n', V]
        s = ad.reshape(ad.matmul(P, ad.reshape(flat, (B, n * V, 1))), (B, n_next))
        if D is not None:
            step_cost = Tensor(local_costs[:, t, :, None].astype(dtype))
            D = ad.reshape(ad.matmul(contrib, step_cost), (B, n_next)) + ad.reshape(
                ad.matmul(back, ad.reshape(D, (B, n, 1))), (B, n_next)
            )
        if trace is not None:
            trace.scores.append(s)
            trace.backpointers.append(back)
            trace.contributions.append(contrib)
            trace.map_backpointers.append(np.argmax(back.data, axis=-1))
            trace.map_labels.append(np.argmax(contrib.data, axis=-1))
            if D is not None:
                trace.losses.append(D)
        if t + 1 < T:
            mixed = ad.matmul(back, state)
            state = recur_from_state(mixed, ad.matmul(contrib, E), enc.recur_ctx[:, t + 1, :], model)
    return s, D


def _pick(weights_from: Tensor, values: Tensor, alpha: float) -> Tensor:
    """peaked-softmax(weights_from) . values, per sentence."""
    return ad.reduce_sum(ad.softmax_scaled(weights_from, alpha) * values, axis=-1)


def _batch(X, Y):
    X, Y = np.asarray(X), np.asarray(Y)
    if X.ndim == 1:
        X = X[None, :]
    if Y.ndim == 1:
        Y = Y[None, :]
    if X.shape != Y.shape:
        raise InputError(f"input shape {X.shape} and gold shape {Y.shape} differ")
    return X, Y


def soft_beam_loss(X, Y, model: TaggerModel, k: int, alpha: float, cost: CostFunction,
                   detach_max: bool = False, trace: SoftBeamTrace | None = None) -> Tensor:
    """Soft direct loss for an equal-length batch, shape ``[B]``."""
    X, Y = _batch(X, Y)
    enc = encode(X, model)
    s_T, D_T = run_soft_beam(enc, model, k, alpha, local_costs=cost.local_costs(Y),
                             detach_max=detach_max, trace=trace)
    return _pick(s_T, D_T, alpha)


def soft_beam_forward(x, y, model: TaggerModel, k: int, alpha: float, cost: CostFunction,
                      detach_max: bool = False) -> tuple[Tensor, SoftBeamTrace]:
    """Soft loss L (scalar) for one sentence and the per-step beam trace."""
    x, y = np.asarray(x), np.asarray(y)
    if x.ndim != 1 or x.shape != y.shape:
        raise InputError(f"input length {x.shape} and gold length {y.shape} differ")
    trace = SoftBeamTrace()
    loss = soft_beam_loss(x, y, model, k, alpha, cost, detach_max, trace)
    return ad.reshape(loss, ()), trace


def soft_hinge_loss(X, Y, model: TaggerModel, k: int, alpha: float, cost: CostFunction,
                    detach_max: bool = False) -> Tensor:
    """max(0, s_max - s(y*)) per sentence, with cost-augmented soft beam scores."""
    X, Y = _batch(X, Y)
    enc = encode(X, model)
    s_T, _ = run_soft_beam(enc, model, k, alpha, augment=cost.local_costs(Y), detach_max=detach_max)
    s_max = _pick(s_T, s_T, alpha)
    gold = sequence_score(enc, Y, model)
    return ad.maximum(s_max - gold, 0.0)


def soft_hinge_forward(x, y, model: TaggerModel, k: int, alpha: float, cost: CostFunction,
                       detach_max: bool = False) -> Tensor:
    x, y = np.asarray(x), np.asarray(y)
    if x.ndim != 1 or x.shape != y.shape:
        raise InputError(f"input length {x.shape} and gold length {y.shape} differ")
    return ad.reshape(soft_hinge_loss(x, y, model, k, alpha, cost, detach_max), ())


def soft_beam_decode_batch(X, model: TaggerModel, k: int, alpha: float):
    """Soft forward pass with hard MAP backpointers; returns ``(labels [B, T], scores [B], trace)``."""
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[None, :]
    trace = SoftBeamTrace()
    with ad.no_grad():
        enc = encode(X, model)
        s_T, _ = run_soft_beam(enc, model, k, alpha, trace=trace)
    B, T = X.shape
    rows = np.arange(B)
    cur = np.argmax(s_T.data, axis=1)
    best = s_T.data[rows, cur]
    labels = np.zeros((B, T), dtype=np.int64)
    for t in range(T - 1, -1, -1):
        labels[:, t] = trace.map_labels[t][rows, cur]
        cur = trace.map_backpointers[t][rows, cur]
    return labels, best, trace


def soft_beam_decode(x, model: TaggerModel, k: int, alpha: float) -> DecodeResult:
    x = np.asarray(x)
    if x.ndim != 1:
        raise InputError("expected a single token sequence")
    labels, best, trace = soft_beam_decode_batch(x, model, k, alpha)
    return DecodeResult(labels[0], float(best[0]), trace)
