"""Discrete beam search with backpointers, greedy decoding and an exhaustive oracle.

Indices are 0-based throughout: a backpointer is the row of the previous beam
and a label is a column of the candidate matrix.

The beam starts from a single live hypothesis (score 0, state built from
``<s>``) and widens to ``k`` as soon as there are enough candidates.  Starting
from ``k`` identical copies would make every row of the first candidate
matrix equal, fill the beam with duplicates of one label, and reduce the
search to greedy decoding.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, InputError
from .model import (
    TaggerModel,
    encode,
    initial_state,
    recur_from_state,
    scores_from_state,
    sequence_score,
)

MAX_EXHAUSTIVE = 10**6


def _check_k(k: int, n: int) -> None:
    if not 1 <= k <= n:
        raise ContractError(f"k={k} must lie in [1, {n}]")


def top_k_max(scores, k: int) -> Tensor:
    """The k largest entries of a score matrix, descending, scan-order ties."""
    scores = ad._lift(scores)
    _check_k(k, scores.size)
    values, _ = ad.topk(ad.reshape(scores, (-1,)), k)
    return values


def top_k_argmax(scores, k: int) -> tuple[np.ndarray, np.ndarray]:
    """(row, column) index pairs of the k largest entries: (backpointers, labels)."""
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    if data.ndim != 2:
        raise ContractError("top_k_argmax expects a k x |V| matrix")
    _check_k(k, data.size)
    order = np.argsort(-data.reshape(-1), kind="stable")[:k]
    return order // data.shape[1], order % data.shape[1]


@dataclass
class HardBeamTrace:
    """Per-step beam contents for one batch: arrays indexed [batch, element]."""

    scores: list[np.ndarray] = field(default_factory=list)
    backpointers: list[np.ndarray] = field(default_factory=list)
    labels: list[np.ndarray] = field(default_factory=list)
    hidden: list[np.ndarray] = field(default_factory=list)
    gaps: list[np.ndarray] = field(default_factory=list)  # [batch] per step


@dataclass
class DecodeResult:
    labels: np.ndarray
    score: float
    trace: object = None


def follow_backpointers(backpointers, labels) -> np.ndarray:
    """Trace element 0 of the last beam back to step 0; returns ``[B, T]``."""
    T = len(labels)
    B = labels[0].shape[0]
    rows = np.arange(B)
    out = np.zeros((B, T), dtype=np.int64)
    cur = np.zeros(B, dtype=np.int64)
    for t in range(T - 1, -1, -1):
        out[:, t] = labels[t][rows, cur]
        cur = backpointers[t][rows, cur]
    return out


def beam_search_batch(X, model: TaggerModel, k: int, score_offsets=None, keep_trace=False):
    """Beam search over an equal-length batch ``X [B, T]``.

    ``score_offsets`` (``[B, T, V]``) is added to every local score, which turns
    the search into cost-augmented decoding when it holds local costs.
    Returns ``(labels [B, T], best scores [B], trace or None)``.
    """
    if k < 1:
        raise ContractError(f"beam size must be >= 1, got {k}")
    with ad.no_grad():
        enc = encode(X, model)
        B, T = enc.batch, enc.length
        V = model.sizes.n_labels
        rows = np.arange(B)[:, None]
        E = model["label_emb"].data
        state = ad.reshape(initial_state(enc, model), (B, 1, -1))
        s = np.zeros((B, 1), dtype=enc.context.dtype)
        trace = HardBeamTrace()
        for t in range(T):
            local = scores_from_state(state, enc.score_ctx[:, t, :], model).data
            if score_offsets is not None:
                local = local + np.asarray(score_offsets)[:, t, None, :]
            flat = (s[:, :, None] + local).reshape(B, -1)
            n_next = min(k, flat.shape[1])
            ranked = np.argsort(-flat, axis=1, kind="stable")
            order = ranked[:, :n_next]
            s = np.take_along_axis(flat, order, axis=1)
            # smallest distance between consecutive entries among the top n_next (+1 if any)
            top = np.take_along_axis(flat, ranked[:, : n_next + 1], axis=1)
            trace.gaps.append(np.min(-np.diff(top, axis=1), axis=1) if top.shape[1] > 1
                              else np.full(B, np.inf))
            bp, y = order // V, order % V
            trace.scores.append(s)
            trace.backpointers.append(bp)
            trace.labels.append(y)
            if keep_trace:
                trace.hidden.append(state.data)
            if t + 1 < T:
                prev = Tensor(state.data[rows, bp])
                state = recur_from_state(prev, Tensor(E[y]), enc.recur_ctx[:, t + 1, :], model)
    labels = follow_backpointers(trace.backpointers, trace.labels)
    return labels, s[:, 0].copy(), trace if keep_trace else None


def _single(x, T):
    x = np.asarray(x)
    if x.ndim != 1:
        raise InputError("expected a single token sequence")
    if T is not None and T != len(x):
        raise InputError(f"tagging decodes exactly len(x)={len(x)} steps, got T={T}")
    return x[None, :]


def beam_search(x, model: TaggerModel, k: int, T: int | None = None) -> DecodeResult:
    labels, score, trace = beam_search_batch(_single(x, T), model, k, keep_trace=True)
    return DecodeResult(labels[0], float(score[0]), trace)


def greedy_decode(x, model: TaggerModel) -> DecodeResult:
    """Per-step argmax of f; identical to beam search with k = 1."""
    return beam_search(x, model, 1)


def rescore(x, labels, model: TaggerModel) -> float:
    """s(y) recomputed by teacher-forced rollout along ``labels``."""
    with ad.no_grad():
        enc = encode(_single(x, None), model)
        return float(sequence_score(enc, np.asarray(labels)[None, :], model).data[0])


def exhaustive_search(x, model: TaggerModel, T: int | None = None, n_labels: int | None = None,
                      chunk: int = 4096) -> DecodeResult:
    """True argmax of s(y) over all |V|^T label sequences (first in lexicographic order on ties)."""
    x = _single(x, T)[0]
    T = len(x)
    V = n_labels or model.sizes.n_labels
    if V**T > MAX_EXHAUSTIVE:
        raise ContractError(f"search space {V}^{T} exceeds {MAX_EXHAUSTIVE}")
    best_score, best = -np.inf, None
    seqs = itertools.product(range(V), repeat=T)
    with ad.no_grad():
        enc1 = encode(x[None, :], model)
        while True:
            block = np.array(list(itertools.islice(seqs, chunk)), dtype=np.int64)
            if block.size == 0:
                break
            n = len(block)
            enc = type(enc1)(*(ad.expand(t, (n,) + t.shape[1:]) for t in
                               (enc1.context, enc1.score_ctx, enc1.recur_ctx)))
            scores = sequence_score(enc, block, model).data
            j = int(np.argmax(scores))
            if scores[j] > best_score:
                best_score, best = float(scores[j]), block[j].copy()
    return DecodeResult(best, best_score)
