"""Sequence-to-sequence tagger: bi-LSTM encoder, LSTM decoder, fixed attention.

The decoder attends deterministically to input position t at output step t:
the encoder context ``c_t`` is fed both to the output scorer ``f`` and to the
recurrence ``r`` that produces the state used at step t.

Decoder state convention (shared by every search routine in the package)::

    state_0     = r(0, E[<s>], c_0)
    scores_t    = f(h_t, c_t)                    t = 0 .. T-1
    state_{t+1} = r(state_t, E[y_t], c_{t+1})

LSTM gates are laid out (input, forget, candidate, output).  Forget-gate
biases start at 1.0.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, InputError, ShapeError, VocabularyError

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class ModelSizes:
    n_inputs: int
    n_labels: int
    hidden: int = 64
    label_dim: int = 8
    input_dim: int = 32
    enc_hidden: int | None = None

    def __post_init__(self):
        if self.n_labels < 2:
            raise ShapeError("need at least two labels")
        if self.n_inputs < 1 or self.hidden < 1 or self.label_dim < 1 or self.input_dim < 1:
            raise ShapeError(f"all sizes must be positive: {self}")

    @property
    def encoder_hidden(self) -> int:
        return self.enc_hidden or self.hidden

    @property
    def context_dim(self) -> int:
        return 2 * self.encoder_hidden


def parameter_shapes(sizes: ModelSizes) -> dict[str, tuple[int, ...]]:
    H, He, C = sizes.hidden, sizes.encoder_hidden, sizes.context_dim
    V, l = sizes.n_labels, sizes.label_dim
    shapes = {"emb_in": (sizes.n_inputs, sizes.input_dim)}
    for d in ("fw", "bw"):
        shapes[f"enc_{d}_Wx"] = (sizes.input_dim, 4 * He)
        shapes[f"enc_{d}_Wh"] = (He, 4 * He)
        shapes[f"enc_{d}_b"] = (4 * He,)
    shapes.update(
        dec_Wh=(H, 4 * H),
        dec_We=(l, 4 * H),
        dec_Wc=(C, 4 * H),
        dec_b=(4 * H,),
        out_Wh=(H, V),
        out_Wc=(C, V),
        out_b=(V,),
        # last row is the start symbol <s>
        label_emb=(V + 1, l),
    )
    return shapes


@dataclass
class TaggerModel:
    sizes: ModelSizes
    params: dict[str, Tensor]
    input_vocab: list[str] = field(default_factory=list)
    label_vocab: list[str] = field(default_factory=list)

    def __post_init__(self):
        expected = parameter_shapes(self.sizes)
        if set(expected) != set(self.params):
            raise ShapeError(f"parameter names differ from {sorted(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def start_id(self) -> int:
        return self.sizes.n_labels

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        ad.zero_grad(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "TaggerModel":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return TaggerModel(self.sizes, params, list(self.input_vocab), list(self.label_vocab))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def init_params(
    seed: int,
    scale: float,
    sizes: ModelSizes,
    dtype=np.float64,
    forget_bias: float = 1.0,
    input_vocab=(),
    label_vocab=(),
) -> TaggerModel:
    """Uniform(-scale, scale) initialisation, reproducible by ``seed``.

    Forget-gate bias slices are overwritten with the constant ``forget_bias``
    afterwards, so they are the only entries that may lie outside the range.
    """
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(sizes).items():
        params[name] = Tensor(rng.uniform(-scale, scale, size=shape).astype(dtype), requires_grad=True)
    for name in ("enc_fw_b", "enc_bw_b"):
        He = sizes.encoder_hidden
        params[name].data[He : 2 * He] = forget_bias
    params["dec_b"].data[sizes.hidden : 2 * sizes.hidden] = forget_bias
    return TaggerModel(sizes, params, list(input_vocab), list(label_vocab))


def zero_model(sizes: ModelSizes, dtype=np.float64) -> TaggerModel:
    params = {
        name: Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
        for name, shape in parameter_shapes(sizes).items()
    }
    return TaggerModel(sizes, params)


# -- encoder -------------------------------------------------------------


def _check_ids(x: np.ndarray, model: TaggerModel) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise InputError(f"token ids must be a sequence or a batch of sequences, got shape {x.shape}")
    if x.shape[1] == 0:
        raise InputError("empty input sequence")
    if not np.issubdtype(x.dtype, np.integer):
        raise InputError("token ids must be integers")
    if x.min() < 0 or x.max() >= model.sizes.n_inputs:
        raise VocabularyError(f"token id outside [0, {model.sizes.n_inputs})")
    return x


def _run_lstm(xproj: Tensor, Wh: Tensor, reverse: bool) -> list[Tensor]:
    B, T, G = xproj.shape
    He = G // 4
    dtype = xproj.dtype
    hc = Tensor(np.zeros((B, 2 * He), dtype=dtype))
    steps = range(T - 1, -1, -1) if reverse else range(T)
    outputs: list[Tensor | None] = [None] * T
    for t in steps:
        gates = xproj[:, t, :] + ad.matmul(hc[:, :He], Wh)
        hc = ad.lstm_cell(gates, hc[:, He:])
        outputs[t] = hc[:, :He]
    return outputs


@dataclass
class EncodedInput:
    """Context vectors ``[B, T, 2He]`` plus their projections into f and r."""

    context: Tensor
    score_ctx: Tensor  # c_t @ out_Wc + out_b, [B, T, V]
    recur_ctx: Tensor  # c_t @ dec_Wc + dec_b, [B, T, 4H]

    @property
    def length(self) -> int:
        return self.context.shape[1]

    @property
    def batch(self) -> int:
        return self.context.shape[0]


def encode(tokens, model: TaggerModel) -> EncodedInput:
    """Run the bi-LSTM over a sequence (or an equal-length batch) of input ids."""
    x = _check_ids(tokens, model)
    B, T = x.shape
    emb = ad.getitem(model["emb_in"], x)  # [B, T, d]
    ctx = []
    for d in ("fw", "bw"):
        xproj = ad.matmul(emb, model[f"enc_{d}_Wx"])
        xproj = xproj + ad.expand(model[f"enc_{d}_b"], xproj.shape)
        ctx.append(ad.stack(_run_lstm(xproj, model[f"enc_{d}_Wh"], reverse=d == "bw"), axis=1))
    context = ad.concat(ctx, axis=-1)
    score_ctx = ad.matmul(context, model["out_Wc"])
    score_ctx = score_ctx + ad.expand(model["out_b"], score_ctx.shape)
    recur_ctx = ad.matmul(context, model["dec_Wc"])
    recur_ctx = recur_ctx + ad.expand(model["dec_b"], recur_ctx.shape)
    return EncodedInput(context, score_ctx, recur_ctx)


# -- decoder pieces ------------------------------------------------------


def decoder_hidden(state: Tensor, model: TaggerModel) -> Tensor:
    return state[..., : model.sizes.hidden]


def scores_from_state(state: Tensor, score_ctx_t: Tensor, model: TaggerModel) -> Tensor:
    """f(h, c_t) for states ``[..., 2H]`` and projected context ``[B, V]``.

    ``state`` is either ``[B, 2H]`` or ``[B, n, 2H]`` (a beam per sentence).
    """
    local = ad.matmul(decoder_hidden(state, model), model["out_Wh"])
    if local.ndim == 3:
        score_ctx_t = ad.reshape(score_ctx_t, (score_ctx_t.shape[0], 1, score_ctx_t.shape[1]))
    return local + ad.expand(score_ctx_t, local.shape)


def recur_from_state(state: Tensor, emb: Tensor, recur_ctx_t: Tensor, model: TaggerModel) -> Tensor:
    """r(state, e, c_next): one decoder LSTM step; shapes as in scores_from_state."""
    H = model.sizes.hidden
    gates = ad.matmul(state[..., :H], model["dec_Wh"]) + ad.matmul(emb, model["dec_We"])
    if gates.ndim == 3:
        recur_ctx_t = ad.reshape(recur_ctx_t, (recur_ctx_t.shape[0], 1, recur_ctx_t.shape[1]))
    gates = gates + ad.expand(recur_ctx_t, gates.shape)
    return ad.lstm_cell(gates, state[..., H:])


def initial_state(enc: EncodedInput, model: TaggerModel) -> Tensor:
    """state_0 = r(0, E[<s>], c_0), shape ``[B, 2H]``."""
    B = enc.batch
    zero = Tensor(np.zeros((B, 2 * model.sizes.hidden), dtype=enc.context.dtype))
    start = ad.getitem(model["label_emb"], np.full(B, model.start_id))
    return recur_from_state(zero, start, enc.recur_ctx[:, 0, :], model)


def label_embedding(labels, model: TaggerModel) -> Tensor:
    return ad.getitem(model["label_emb"], np.asarray(labels))


def teacher_forced_scores(enc: EncodedInput, labels, model: TaggerModel) -> Tensor:
    """Local scores ``[B, T, V]`` along the gold label path (teacher forcing)."""
    Y = np.asarray(labels)
    if Y.ndim == 1:
        Y = Y[None, :]
    B, T = enc.batch, enc.length
    if Y.shape != (B, T):
        raise InputError(f"labels have shape {Y.shape}, input has {(B, T)}")
    if Y.min() < 0 or Y.max() >= model.sizes.n_labels:
        raise VocabularyError("label id out of range")
    state = initial_state(enc, model)
    out = []
    for t in range(T):
        out.append(scores_from_state(state, enc.score_ctx[:, t, :], model))
        if t + 1 < T:
            state = recur_from_state(state, label_embedding(Y[:, t], model), enc.recur_ctx[:, t + 1, :], model)
    return ad.stack(out, axis=1)


def sequence_score(enc: EncodedInput, labels, model: TaggerModel) -> Tensor:
    """Model score s(y) = sum_t f(h_t, y_t) under teacher forcing, shape ``[B]``."""
    Y = np.asarray(labels)
    if Y.ndim == 1:
        Y = Y[None, :]
    scores = teacher_forced_scores(enc, Y, model)
    B, T = Y.shape
    picked = ad.getitem(scores, (np.arange(B)[:, None], np.arange(T)[None, :], Y))
    return ad.reduce_sum(picked, axis=1)


# -- single-sentence API --------------------------------------------------


def local_score(h: Tensor, c_t: Tensor, model: TaggerModel) -> Tensor:
    """f(h, c_t) for one decoder hidden vector ``[H]`` and context ``[2He]``."""
    h, c_t = ad._lift(h), ad._lift(c_t)
    if h.shape != (model.sizes.hidden,) or c_t.shape != (model.sizes.context_dim,):
        raise ShapeError(f"local_score got h {h.shape} and c {c_t.shape}")
    return ad.matmul(h, model["out_Wh"]) + ad.matmul(c_t, model["out_Wc"]) + model["out_b"]


def recur(state: Tensor, e: Tensor, c_next: Tensor, model: TaggerModel) -> Tensor:
    """One decoder LSTM step for state ``[2H]`` (h then cell), embedding ``[l]``, context ``[2He]``."""
    state, e, c_next = ad._lift(state), ad._lift(e), ad._lift(c_next)
    H = model.sizes.hidden
    if state.shape != (2 * H,) or e.shape != (model.sizes.label_dim,) or c_next.shape != (model.sizes.context_dim,):
        raise ShapeError(f"recur got state {state.shape}, e {e.shape}, c {c_next.shape}")
    gates = (
        ad.matmul(state[:H], model["dec_Wh"])
        + ad.matmul(e, model["dec_We"])
        + ad.matmul(c_next, model["dec_Wc"])
        + model["dec_b"]
    )
    return ad.lstm_cell(gates, state[H:])


# -- checkpoints ---------------------------------------------------------


def vocab_hash(vocab) -> str:
    return hashlib.sha256("\n".join(vocab).encode("utf-8")).hexdigest()[:16]


def save_checkpoint(model: TaggerModel, path, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "sizes": asdict(model.sizes),
        "input_vocab": model.input_vocab,
        "label_vocab": model.label_vocab,
        "input_vocab_hash": vocab_hash(model.input_vocab),
        "label_vocab_hash": vocab_hash(model.label_vocab),
        "dtype": str(next(iter(model.params.values())).dtype),
        "params": {
            name: {"shape": list(t.shape), "values": t.data.ravel().tolist()} for name, t in model.params.items()
        },
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_checkpoint(path) -> TaggerModel:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {payload.get('format_version')!r}")
    try:
        for key in ("input", "label"):
            vocab = payload[f"{key}_vocab"]
            if vocab_hash(vocab) != payload[f"{key}_vocab_hash"]:
                raise CheckpointError(f"{key} vocabulary hash mismatch")
        sizes = ModelSizes(**payload["sizes"])
        dtype = np.dtype(payload.get("dtype", "float64"))
        params = {}
        for name, entry in payload["params"].items():
            arr = np.asarray(entry["values"], dtype=dtype).reshape(entry["shape"])
            params[name] = Tensor(arr, requires_grad=True)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint {path}: {type(exc).__name__} {exc}") from None
    try:
        return TaggerModel(sizes, params, payload["input_vocab"], payload["label_vocab"])
    except ShapeError as exc:
        raise CheckpointError(str(exc)) from None
