"""Objectives, alpha annealing, the optimiser and the training loop."""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .costs import CostFunction
from .data import TaggedCorpus, evaluate, length_batches
from .decoding import DECODERS, decode_all
from .errors import ConfigError, ContractError, DivergenceError, InputError
from .model import ModelSizes, TaggerModel, encode, init_params, teacher_forced_scores
from .soft_beam import soft_beam_loss, soft_hinge_loss

log = logging.getLogger(__name__)

OBJECTIVES = ("ce", "soft_direct", "soft_hinge")


@dataclass(frozen=True)
class AlphaSchedule:
    kind: str = "constant"
    alpha0: float = 1.0
    ratio: float = 1.5
    alpha_max: float = 1000.0

    def __post_init__(self):
        if self.kind not in ("constant", "geometric"):
            raise ConfigError(f"unknown alpha schedule {self.kind!r}")
        if not self.alpha0 > 0:
            raise ConfigError("alpha0 must be positive")
        if self.ratio < 1:
            raise ConfigError("ratio must be >= 1")
        if self.alpha_max < self.alpha0:
            raise ConfigError("alpha_max must be >= alpha0")

    @classmethod
    def constant(cls, alpha0: float) -> "AlphaSchedule":
        return cls("constant", alpha0, 1.0, alpha0)

    @classmethod
    def geometric(cls, alpha0: float = 1.0, ratio: float = 1.5, alpha_max: float = 1000.0) -> "AlphaSchedule":
        return cls("geometric", alpha0, ratio, alpha_max)


def anneal_alpha(schedule: AlphaSchedule, epoch: int) -> float:
    """constant -> alpha0; geometric -> min(alpha0 * ratio**epoch, alpha_max)."""
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    if schedule.kind == "constant":
        return schedule.alpha0
    return min(schedule.alpha0 * schedule.ratio**epoch, schedule.alpha_max)


@dataclass
class TrainConfig:
    objective: str = "ce"
    k: int = 3
    alpha: AlphaSchedule = field(default_factory=AlphaSchedule)
    epochs: int = 50
    lr: float = 1e-3
    clip: float = 5.0
    seed: int = 0
    batch_size: int = 1
    init_scale: float = 0.1
    cost: str = "hamming"
    default_weight: float = 2.0
    early_stop_metric: str = "accuracy"
    early_stop_decoder: str | None = None
    eval_decoders: tuple = ("greedy", "hard_beam")
    decode_alpha: float | None = None
    detach_max: bool = False
    allow_cold_start: bool = False

    def __post_init__(self):
        if isinstance(self.alpha, dict):
            self.alpha = AlphaSchedule(**self.alpha)
        self.eval_decoders = tuple(self.eval_decoders)
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.epochs < 1 or self.k < 1 or self.batch_size < 1:
            raise ConfigError("epochs, k and batch_size must be >= 1")
        if not self.lr > 0 or not self.clip > 0:
            raise ConfigError("lr and clip must be positive")
        if self.early_stop_metric not in ("accuracy", "macro_f1"):
            raise ConfigError("early_stop_metric must be accuracy or macro_f1")
        for d in self.eval_decoders + ((self.early_stop_decoder,) if self.early_stop_decoder else ()):
            if d not in DECODERS:
                raise ConfigError(f"unknown decoder {d!r}")

    @property
    def selection_decoder(self) -> str:
        if self.early_stop_decoder:
            return self.early_stop_decoder
        return "greedy" if self.objective == "ce" else "hard_beam"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval_decoders"] = list(self.eval_decoders)
        return d


# -- objectives --------------------------------------------------------------


def ce_loss_batch(X, Y, model: TaggerModel) -> Tensor:
    """-sum_t log softmax(f(h_t))[y*_t] under teacher forcing, shape ``[B]``."""
    X, Y = np.asarray(X), np.asarray(Y)
    if X.ndim == 1:
        X, Y = X[None, :], Y[None, :]
    if X.shape != Y.shape:
        raise InputError(f"input shape {X.shape} and gold shape {Y.shape} differ")
    enc = encode(X, model)
    logp = ad.log_softmax(teacher_forced_scores(enc, Y, model))
    B, T = Y.shape
    picked = ad.getitem(logp, (np.arange(B)[:, None], np.arange(T)[None, :], Y))
    return ad.neg(ad.reduce_sum(picked, axis=1))


def ce_loss(x, y, model: TaggerModel) -> Tensor:
    x, y = np.asarray(x), np.asarray(y)
    if x.ndim != 1 or x.shape != y.shape:
        raise InputError(f"input length {x.shape} and gold length {y.shape} differ")
    return ad.reshape(ce_loss_batch(x, y, model), ())


def objective_batch(config: TrainConfig, X, Y, model: TaggerModel, alpha: float, cost: CostFunction) -> Tensor:
    if config.objective == "ce":
        return ce_loss_batch(X, Y, model)
    if config.objective == "soft_direct":
        return soft_beam_loss(X, Y, model, config.k, alpha, cost, config.detach_max)
    return soft_hinge_loss(X, Y, model, config.k, alpha, cost, config.detach_max)


# -- optimiser -----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def clip_by_global_norm(grads: dict[str, np.ndarray], clip: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > clip:
        scale = clip / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
                   lr: float, clip: float) -> float:
    """Global-norm clipping followed by an Adam update, in place; returns the pre-clip norm."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise InputError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
    grads, norm = clip_by_global_norm(grads, clip)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return norm


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainState:
    model: TaggerModel
    best_model: TaggerModel
    optimizer: AdamState
    epoch: int = 0
    alpha: float = 1.0
    best_metric: float = -math.inf
    best_epoch: int = 0
    history: list = field(default_factory=list)
    timings: list = field(default_factory=list)


def metric_columns(decoders) -> list[str]:
    cols = ["epoch", "alpha", "objective"]
    for d in decoders:
        cols += [f"dev_{d}_accuracy", f"dev_{d}_macro_f1"]
    return cols + ["selected"]


def evaluate_decoders(model: TaggerModel, corpus: TaggedCorpus, decoders, k: int, alpha: float) -> dict:
    encoded = corpus.encoded()
    inputs = [x for x, _ in encoded]
    gold = [y for _, y in encoded]
    default = corpus.label_vocab.stoi.get("O")
    out = {}
    for d in decoders:
        pred = decode_all(inputs, model, d, k, alpha)
        out[d] = evaluate([p.tolist() for p in pred], [g.tolist() for g in gold], default_label=default)
    return out


def _initial_model(train_corpus, config, warm_start, sizes):
    if warm_start is not None:
        return warm_start.copy()
    if config.objective != "ce":
        if not config.allow_cold_start:
            raise ContractError(f"{config.objective} needs a warm-start model (or allow_cold_start)")
        warnings.warn(f"training {config.objective} from a random initialisation", stacklevel=3)
    sizes = sizes or ModelSizes(len(train_corpus.input_vocab), len(train_corpus.label_vocab))
    return init_params(config.seed, config.init_scale, sizes,
                       input_vocab=list(train_corpus.input_vocab), label_vocab=list(train_corpus.label_vocab))


def train(train_corpus: TaggedCorpus, dev_corpus: TaggedCorpus, config: TrainConfig,
          warm_start: TaggerModel | None = None, sizes: ModelSizes | None = None,
          on_epoch=None) -> TrainState:
    """Train and return the state holding the best-dev snapshot.

    Row 0 of the history evaluates the starting model, which is therefore a
    candidate for the best snapshot too.  ``on_epoch(row)`` is called after
    every row.
    """
    model = _initial_model(train_corpus, config, warm_start, sizes)
    cost = CostFunction.for_labels(config.cost, list(train_corpus.label_vocab),
                                   default_weight=config.default_weight)
    data = train_corpus.encoded()
    lengths = [len(x) for x, _ in data]
    decoders = list(dict.fromkeys(config.eval_decoders + (config.selection_decoder,)))
    state = TrainState(model=model, best_model=model.copy(), optimizer=AdamState(),
                       alpha=anneal_alpha(config.alpha, 0))

    def record(epoch, objective, alpha, seconds):
        decode_alpha = config.decode_alpha or alpha
        metrics = evaluate_decoders(model, dev_corpus, decoders, config.k, decode_alpha)
        score = metrics[config.selection_decoder][config.early_stop_metric]
        improved = score > state.best_metric
        if improved:
            state.best_metric, state.best_epoch = score, epoch
            state.best_model = model.copy()
        row = {"epoch": epoch, "alpha": alpha, "objective": objective}
        for d in decoders:
            row[f"dev_{d}_accuracy"] = metrics[d]["accuracy"]
            row[f"dev_{d}_macro_f1"] = metrics[d]["macro_f1"]
        row["selected"] = int(improved)
        state.history.append(row)
        state.timings.append({"epoch": epoch, "seconds": seconds})
        log.info("epoch %d alpha %.4g objective %s dev %s %.4f%s", epoch, alpha, objective,
                 config.selection_decoder, score, " *" if improved else "")
        if on_epoch is not None:
            on_epoch(row)

    record(0, float("nan"), state.alpha, 0.0)
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        alpha = anneal_alpha(config.alpha, epoch - 1)
        state.epoch, state.alpha = epoch, alpha
        rng = np.random.default_rng([config.seed, epoch])
        total, count = 0.0, 0
        for b, idx in enumerate(length_batches(lengths, config.batch_size, rng)):
            X = np.stack([data[i][0] for i in idx])
            Y = np.stack([data[i][1] for i in idx])
            losses = objective_batch(config, X, Y, model, alpha, cost)
            value = float(losses.data.sum())
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite {config.objective} loss at epoch {epoch}, batch {b}, alpha {alpha:g}"
                )
            total += value
            count += len(idx)
            model.zero_grad()
            loss = ad.reduce_sum(losses) * (1.0 / len(idx))
            if loss.requires_grad:
                loss.backward()
            grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for n, p in model.params.items()}
            optimizer_step(model.params, grads, state.optimizer, config.lr, config.clip)
        record(epoch, total / max(count, 1), alpha, time.perf_counter() - started)
    model.zero_grad()
    return state
