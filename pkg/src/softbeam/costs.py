"""Decomposable per-step costs d(w; gold) and the sequence loss built from them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, VocabularyError

KINDS = ("hamming", "weighted_hamming", "zero")


@dataclass(frozen=True)
class CostFunction:
    """Cost of predicting label w when the gold label is g.

    ``weighted_hamming`` charges ``default_weight`` for predicting the default
    label (``'O'``) where the gold label is something else, and 1 for every
    other mistake.
    """

    kind: str
    n_labels: int
    default_id: int | None = None
    default_weight: float = 2.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown cost kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "weighted_hamming" and self.default_id is None:
            raise ConfigError("weighted_hamming needs the id of the default label")
        if self.default_weight < 0:
            raise ConfigError("default_weight must be non-negative")

    @classmethod
    def for_labels(cls, kind: str, labels, default_label: str = "O", default_weight: float = 2.0):
        labels = list(labels)
        default_id = labels.index(default_label) if default_label in labels else None
        return cls(kind, len(labels), default_id, default_weight)

    def matrix(self) -> np.ndarray:
        """``C[w, g]`` for all predicted w and gold g."""
        V = self.n_labels
        if self.kind == "zero":
            return np.zeros((V, V))
        C = 1.0 - np.eye(V)
        if self.kind == "weighted_hamming":
            C[self.default_id, :] *= self.default_weight
        return C

    def local_costs(self, gold) -> np.ndarray:
        """D~ for every step: ``gold [..., T]`` -> ``[..., T, V]``."""
        gold = np.asarray(gold)
        if gold.size and (gold.min() < 0 or gold.max() >= self.n_labels):
            raise VocabularyError("gold label id out of range")
        return self.matrix().T[gold]


def local_cost(cost: CostFunction, predicted: int, gold: int) -> float:
    for label in (predicted, gold):
        if not 0 <= int(label) < cost.n_labels:
            raise VocabularyError(f"unknown label id {label}")
    return float(cost.matrix()[int(predicted), int(gold)])


def direct_loss(predicted, gold, cost: CostFunction) -> float:
    """L(y^, y*) = sum_t d(y^_t; y*_t)."""
    predicted, gold = np.asarray(predicted), np.asarray(gold)
    if predicted.shape != gold.shape:
        raise InputError(f"prediction length {predicted.shape} differs from gold {gold.shape}")
    if predicted.size == 0:
        return 0.0
    C = cost.matrix()
    for arr in (predicted, gold):
        if arr.min() < 0 or arr.max() >= cost.n_labels:
            raise VocabularyError("label id out of range")
    return float(C[predicted, gold].sum())
