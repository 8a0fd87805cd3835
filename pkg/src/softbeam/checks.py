"""Self-checks built on independent oracles.

* :func:`gradcheck` compares backprop against central differences for the
  three training objectives.
* :func:`convergence_check` compares the soft beam at a large alpha with hard
  beam search on random tiny models.
* :func:`exhaustive_agreement` compares full-width beam search with brute force.
* :func:`hinge_zero_fixture` builds a model whose gold path wins by a known margin.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .costs import CostFunction, direct_loss
from .hard_beam import beam_search, exhaustive_search, rescore
from .model import ModelSizes, TaggerModel, init_params
from .soft_beam import soft_beam_decode, soft_beam_forward, soft_hinge_forward

GRADCHECK_TOLERANCE = 1e-4


@dataclass
class GradcheckRow:
    objective: str
    alpha: float | None
    block: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error < GRADCHECK_TOLERANCE


def gradcheck_model(seed: int = 0, n_labels: int = 5, hidden: int = 6, n_inputs: int = 6,
                    scale: float = 0.5) -> TaggerModel:
    sizes = ModelSizes(n_inputs=n_inputs, n_labels=n_labels, hidden=hidden, label_dim=3, input_dim=3,
                       enc_hidden=3)
    return init_params(seed, scale, sizes)


def gradcheck(seed: int = 0, alphas=(1.0, 5.0), k: int = 3, T: int = 4, n_labels: int = 5,
              hidden: int = 6, eps: float = 1e-5) -> list[GradcheckRow]:
    """Max relative error per parameter block for soft_direct, soft_hinge and ce."""
    from .training import ce_loss

    model = gradcheck_model(seed, n_labels, hidden)
    rng = np.random.default_rng(seed)
    x = rng.integers(0, model.sizes.n_inputs, T)
    y = rng.integers(0, n_labels, T)
    cost = CostFunction("hamming", n_labels)
    jobs = []
    for alpha in alphas:
        jobs.append(("soft_direct", alpha, lambda a=alpha: soft_beam_forward(x, y, model, k, a, cost)[0]))
        jobs.append(("soft_hinge", alpha, lambda a=alpha: soft_hinge_forward(x, y, model, k, a, cost)))
    jobs.append(("ce", None, lambda: ce_loss(x, y, model)))
    rows = []
    for objective, alpha, fn in jobs:
        report = ad.check_gradients(fn, model.params, eps)
        rows += [GradcheckRow(objective, alpha, block, err) for block, err in report.items()]
    model.zero_grad()
    return rows


@dataclass
class ConvergenceCase:
    seed: int
    n_labels: int
    length: int
    k: int
    min_gap: float
    soft_loss: float
    hard_loss: float
    soft_labels: np.ndarray
    hard_labels: np.ndarray

    @property
    def loss_error(self) -> float:
        return abs(self.soft_loss - self.hard_loss)

    @property
    def same_output(self) -> bool:
        return bool(np.array_equal(self.soft_labels, self.hard_labels))


def convergence_check(n_models: int = 50, alpha: float = 1e4, min_gap: float = 1e-3, scale: float = 5.0,
                      seed: int = 0, max_tries: int = 10_000) -> tuple[list[ConvergenceCase], int]:
    """Soft beam at ``alpha`` against hard beam on random tiny models.

    Models are drawn with |V| in [2, 5], T in [1, 4], k in [1, 3] and
    parameters uniform in ``[-scale, scale]``; an instance is kept only when
    every step's top-k candidate scores are at least ``min_gap`` apart.
    Returns the kept cases and the number of rejected draws.
    """
    cases, rejected = [], 0
    for i in range(max_tries):
        if len(cases) == n_models:
            break
        rng = np.random.default_rng([seed, i])
        V, T, k = int(rng.integers(2, 6)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
        sizes = ModelSizes(n_inputs=8, n_labels=V, hidden=4, label_dim=3, input_dim=3)
        model = init_params(int(rng.integers(2**31)), scale, sizes)
        x, y = rng.integers(0, 8, T), rng.integers(0, V, T)
        hard = beam_search(x, model, k)
        gap = float(min(g[0] for g in hard.trace.gaps))
        if gap < min_gap:
            rejected += 1
            continue
        cost = CostFunction("hamming", V)
        with ad.no_grad():
            soft, _ = soft_beam_forward(x, y, model, k, alpha, cost)
        cases.append(ConvergenceCase(
            seed=i, n_labels=V, length=T, k=k, min_gap=gap,
            soft_loss=soft.item(), hard_loss=direct_loss(hard.labels, y, cost),
            soft_labels=soft_beam_decode(x, model, k, alpha).labels, hard_labels=hard.labels,
        ))
    return cases, rejected


def exhaustive_agreement(n_instances: int = 100, n_labels: int = 3, length: int = 3, seed: int = 0,
                         scale: float = 1.0, tie_margin: float = 1e-9) -> tuple[int, int, int]:
    """Full-width beam search against brute force.

    Draws with a near-tie between the best two sequences are skipped.
    Returns ``(agreements, instances, skipped)``.
    """
    k = n_labels**length
    agree = done = skipped = 0
    i = 0
    while done < n_instances:
        rng = np.random.default_rng([seed, i])
        i += 1
        sizes = ModelSizes(n_inputs=6, n_labels=n_labels, hidden=4, label_dim=3, input_dim=3)
        model = init_params(int(rng.integers(2**31)), scale, sizes)
        x = rng.integers(0, 6, length)
        scores = sorted((rescore(x, y, model) for y in itertools.product(range(n_labels), repeat=length)),
                        reverse=True)
        if scores[0] - scores[1] < tie_margin:
            skipped += 1
            continue
        beam, exact = beam_search(x, model, k), exhaustive_search(x, model)
        agree += int(np.array_equal(beam.labels, exact.labels))
        done += 1
    return agree, done, skipped


def hinge_zero_fixture(seed: int = 0, n_labels: int = 4, length: int = 4, bonus: float = 5.0):
    """A model whose gold path beats every other sequence by a verified margin.

    A random model gets a large output bias on one label, so the all-gold
    sequence dominates.  Returns ``(model, x, y, margin)`` where the margin is
    measured by exhaustive search over the remaining sequences.
    """
    rng = np.random.default_rng(seed)
    sizes = ModelSizes(n_inputs=6, n_labels=n_labels, hidden=4, label_dim=3, input_dim=3)
    model = init_params(seed, 0.3, sizes)
    gold_label = int(rng.integers(n_labels))
    model["out_b"].data[gold_label] += bonus
    x = rng.integers(0, 6, length)
    y = np.full(length, gold_label)
    best = exhaustive_search(x, model)
    if not np.array_equal(best.labels, y):
        raise AssertionError("fixture gold path is not the argmax")
    runner_up = max(rescore(x, other, model) for other in itertools.product(range(n_labels), repeat=length)
                    if not np.array_equal(other, y))
    return model, x, y, best.score - runner_up


def timed(fn, *args, **kwargs):
    started = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - started
