"""Corpus-level decoding with any of the three decoders."""

from __future__ import annotations

import numpy as np

from .data import length_batches
from .errors import ConfigError
from .hard_beam import beam_search_batch
from .model import TaggerModel
from .soft_beam import soft_beam_decode_batch

DECODERS = ("greedy", "hard_beam", "soft_beam")


def decode_batch(X, model: TaggerModel, decoder: str, k: int = 3, alpha: float = 1.0) -> np.ndarray:
    if decoder == "greedy":
        return beam_search_batch(X, model, 1)[0]
    if decoder == "hard_beam":
        return beam_search_batch(X, model, k)[0]
    if decoder == "soft_beam":
        return soft_beam_decode_batch(X, model, k, alpha)[0]
    raise ConfigError(f"unknown decoder {decoder!r}; expected one of {DECODERS}")


def decode_all(inputs, model: TaggerModel, decoder: str, k: int = 3, alpha: float = 1.0,
               batch_size: int = 128) -> list[np.ndarray]:
    """Decode every id sequence in ``inputs``; output order follows input order."""
    out: list[np.ndarray | None] = [None] * len(inputs)
    for idx in length_batches([len(x) for x in inputs], batch_size):
        X = np.stack([inputs[i] for i in idx])
        for i, labels in zip(idx, decode_batch(X, model, decoder, k, alpha)):
            out[i] = labels
    return out
