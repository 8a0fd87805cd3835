"""Command line: train, decode, eval, gradcheck, experiment.

On failure every command prints one line ``error[<category>]: <message>`` to
stderr and exits with a nonzero code.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .checks import GRADCHECK_TOLERANCE, gradcheck
from .config import build, load_json
from .data import Vocab, evaluate, write_tsv
from .decoding import DECODERS, decode_all
from .errors import CheckpointError, InputError, ParseError, SoftBeamError
from .experiment import ExperimentConfig, run_experiment
from .model import load_checkpoint, save_checkpoint
from .runs import ModelConfig, TaskConfig, load_task, manifest, write_csv, write_json
from .training import AlphaSchedule, TrainConfig, metric_columns, train

log = logging.getLogger("softbeam")

EXIT_CODES = {"config": 2, "input": 3, "parse": 3, "vocabulary": 3, "checkpoint": 4, "divergence": 5,
              "check": 6}


@dataclass
class TrainRunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ce: TrainConfig | None = None  # stage run first when a soft objective has no warm start
    warm_start: str | None = None

    @classmethod
    def from_dict(cls, data: dict, path: str = "config") -> "TrainRunConfig":
        nested = {"task": TaskConfig, "model": ModelConfig}
        train_nested = {"alpha": AlphaSchedule}
        cfg = build(cls, {k: v for k, v in data.items() if k not in ("train", "ce")}, path, nested)
        if "train" in data:
            cfg.train = build(TrainConfig, data["train"], f"{path}.train", train_nested)
        if data.get("ce") is not None:
            cfg.ce = build(TrainConfig, {"objective": "ce", **data["ce"]}, f"{path}.ce", train_nested)
        return cfg


class CheckFailed(SoftBeamError):
    category = "check"


# -- train -------------------------------------------------------------------


def _run_stage(parts, train_cfg: TrainConfig, model_cfg: ModelConfig, warm, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    sizes = None if warm is not None else model_cfg.sizes(parts["train"])
    state = train(parts["train"], parts["dev"], train_cfg, warm_start=warm, sizes=sizes,
                  on_epoch=lambda row: log.info("%s", {k: row[k] for k in ("epoch", "alpha", "objective")}))
    decoders = list(dict.fromkeys(train_cfg.eval_decoders + (train_cfg.selection_decoder,)))
    write_csv(out / "metrics.csv", state.history, metric_columns(decoders))
    write_csv(out / "timings.csv", state.timings, ["epoch", "seconds"])
    model = state.best_model
    model.input_vocab = list(parts["train"].input_vocab)
    model.label_vocab = list(parts["train"].label_vocab)
    save_checkpoint(model, out / "checkpoint.json", extra={"best_epoch": state.best_epoch})
    return {"objective": train_cfg.objective, "directory": str(out), "checkpoint": str(out / "checkpoint.json"),
            "best_epoch": state.best_epoch, "best_dev": state.best_metric,
            "selection": f"{train_cfg.selection_decoder}/{train_cfg.early_stop_metric}"}


def cmd_train(args) -> int:
    raw = load_json(args.config)
    cfg = TrainRunConfig.from_dict(raw)
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
        raw = {**raw, "train": {**raw.get("train", {}), "seed": args.seed}}
    warm_path = args.checkpoint or cfg.warm_start
    out = Path(args.out or "run")
    parts = load_task(cfg.task)
    stages = []
    warm = load_checkpoint(warm_path) if warm_path else None
    if warm is None and cfg.train.objective != "ce" and not cfg.train.allow_cold_start:
        ce_cfg = cfg.ce or TrainConfig(objective="ce", seed=cfg.train.seed)
        stage = _run_stage(parts, ce_cfg, cfg.model, None, out / "ce")
        stages.append(stage)
        warm_path = stage["checkpoint"]
        warm = load_checkpoint(warm_path)
    stages.append(_run_stage(parts, cfg.train, cfg.model, warm, out))
    write_json(out / "manifest.json", manifest(raw, cfg.train.seed, "train", warm_start=warm_path, stages=stages))
    print(json.dumps(stages[-1], sort_keys=True))
    return 0


# -- decode ------------------------------------------------------------------


def read_tokens(path) -> list[list[str]]:
    """Sentences of tokens from a TSV whose first column is the token."""
    sentences, current = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                if current:
                    sentences.append(current)
                    current = []
                continue
            token = line.split("\t")[0]
            if not token:
                raise ParseError("empty token", line=lineno)
            current.append(token)
    if current:
        sentences.append(current)
    return sentences


def cmd_decode(args) -> int:
    if not args.checkpoint:
        raise InputError("decode needs --checkpoint")
    if not args.input:
        raise InputError("decode needs --input")
    model = load_checkpoint(args.checkpoint)
    if not model.input_vocab or not model.label_vocab:
        raise CheckpointError(f"{args.checkpoint} carries no vocabularies")
    vocab = Vocab(model.input_vocab)
    if "<unk>" in vocab:
        vocab.unk = "<unk>"
    sentences = read_tokens(args.input)
    try:
        inputs = [vocab.encode(tokens) for tokens in sentences]
    except KeyError as exc:
        raise CheckpointError(f"input does not match the checkpoint vocabulary: {exc}") from None
    alpha = args.alpha if args.alpha is not None else 1.0
    preds = decode_all(inputs, model, args.decoder, args.k, alpha)
    out = [(tokens, [model.label_vocab[i] for i in p]) for tokens, p in zip(sentences, preds)]
    target = Path(args.out or "predictions.tsv")
    write_tsv(target, out)
    print(json.dumps({"predictions": str(target), "sentences": len(out), "decoder": args.decoder, "k": args.k,
                      "alpha": alpha}, sort_keys=True))
    return 0


# -- eval --------------------------------------------------------------------


def _read_aligned(pred_path, gold_path):
    """Label sequences from two TSVs that must agree line by line on tokens and blanks."""
    with open(pred_path, encoding="utf-8") as fh:
        pred_lines = fh.read().splitlines()
    with open(gold_path, encoding="utf-8") as fh:
        gold_lines = fh.read().splitlines()
    while pred_lines and not pred_lines[-1].strip():
        pred_lines.pop()
    while gold_lines and not gold_lines[-1].strip():
        gold_lines.pop()
    pred, gold, p_cur, g_cur = [], [], [], []
    for n in range(max(len(pred_lines), len(gold_lines))):
        lineno = n + 1
        if n >= len(pred_lines) or n >= len(gold_lines):
            raise InputError(f"line {lineno}: files have different lengths "
                             f"({len(pred_lines)} vs {len(gold_lines)} lines)")
        p, g = pred_lines[n], gold_lines[n]
        if not p.strip() or not g.strip():
            if p.strip() or g.strip():
                raise InputError(f"line {lineno}: sentence boundary in only one file")
            if g_cur:
                pred.append(p_cur)
                gold.append(g_cur)
                p_cur, g_cur = [], []
            continue
        pp, gp = p.split("\t"), g.split("\t")
        if len(pp) != 2:
            raise ParseError(f"prediction line is not 'token<TAB>label': {p!r}", line=lineno)
        if len(gp) != 2:
            raise ParseError(f"gold line is not 'token<TAB>label': {g!r}", line=lineno)
        if pp[0] != gp[0]:
            raise InputError(f"line {lineno}: token {pp[0]!r} in predictions but {gp[0]!r} in gold")
        p_cur.append(pp[1])
        g_cur.append(gp[1])
    if g_cur:
        pred.append(p_cur)
        gold.append(g_cur)
    return pred, gold


def cmd_eval(args) -> int:
    if not args.pred or not args.gold:
        raise InputError("eval needs --pred and --gold")
    pred, gold = _read_aligned(args.pred, args.gold)
    report = evaluate(pred, gold, default_label=args.default_label)
    print(f"tokens {report['tokens']}  accuracy {report['accuracy']:.4f}  macro_f1 {report['macro_f1']:.4f}")
    for label, row in sorted(report["per_label"].items()):
        print(f"  {label:>8}  tp {row['tp']:5d}  fp {row['fp']:5d}  fn {row['fn']:5d}  f1 {row['f1']:.4f}")
    if args.out:
        write_json(args.out, report)
    return 0


# -- gradcheck ---------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    alphas = [args.alpha] if args.alpha is not None else [1.0, 5.0]
    rows = gradcheck(seed=args.seed or 0, alphas=alphas, k=args.k, T=args.length, n_labels=args.labels,
                     hidden=args.hidden)
    worst: dict = {}
    for row in rows:
        key = (row.objective, row.alpha)
        worst[key] = max(worst.get(key, 0.0), row.error)
        if args.verbose:
            print(f"{row.objective:12s} alpha={row.alpha}  {row.block:12s} {row.error:.3e}")
    failed = False
    for (objective, alpha), err in worst.items():
        ok = err < GRADCHECK_TOLERANCE
        failed |= not ok
        label = objective if alpha is None else f"{objective} alpha={alpha:g}"
        print(f"{'PASS' if ok else 'FAIL'}  {label:24s} max relative error {err:.3e}")
    if args.out:
        write_json(args.out, [dataclasses.asdict(r) for r in rows])
    if failed:
        raise CheckFailed(f"gradient check above {GRADCHECK_TOLERANCE:g}")
    return 0


# -- experiment --------------------------------------------------------------


def cmd_experiment(args) -> int:
    raw = load_json(args.config)
    if args.seed is not None:
        raw = {**raw, "seed": args.seed}
    cfg = ExperimentConfig.from_dict(raw)
    if args.k is not None:
        cfg.ce = dataclasses.replace(cfg.ce, k=args.k)
        cfg.soft = dataclasses.replace(cfg.soft, k=args.k)
    if args.alpha is not None:
        cfg.decode_alpha = args.alpha
    out = Path(args.out or "experiment")
    summary = run_experiment(cfg, out, warm_start=args.checkpoint)
    print((out / "table.md").read_text(encoding="utf-8"), end="")
    if summary["ce_decoder_gap"]:
        gap = summary["ce_decoder_gap"]
        print(f"CE warm start dev {summary['metric']}: greedy {gap['greedy']:.4f}, hard beam {gap['hard_beam']:.4f},"
              f" beam minus greedy {gap['beam_minus_greedy']:+.4f}")
    return 0


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softbeam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, k_default=3):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--checkpoint", help="model checkpoint (warm start for train/experiment)")
        p.add_argument("--decoder", choices=DECODERS, default="hard_beam")
        p.add_argument("--k", type=int, default=k_default, help="beam size")
        p.add_argument("--alpha", type=float, help="peaked-softmax alpha")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output file or directory")

    p = sub.add_parser("train", help="train a model from a JSON config")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="tag a TSV file with a trained model")
    common(p)
    p.add_argument("--input", help="TSV whose first column holds the tokens")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score predictions against gold")
    common(p)
    p.add_argument("--pred", help="predicted TSV")
    p.add_argument("--gold", help="gold TSV")
    p.add_argument("--default-label", default="O", help="label left out of macro F1")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare backprop with finite differences")
    common(p)
    p.add_argument("--length", type=int, default=4)
    p.add_argument("--labels", type=int, default=5)
    p.add_argument("--hidden", type=int, default=6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("experiment", help="run the objective x decoder grid")
    common(p, k_default=None)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except SoftBeamError as exc:
        message = " ".join(str(exc).split())
        print(f"error[{exc.category}]: {message}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"error[io]: {exc.strerror}: {exc.filename}", file=sys.stderr)
        return 7


if __name__ == "__main__":
    sys.exit(main())
