"""The comparison grid: training objectives as rows, decoders as columns.

One CE stage (``restarts`` seeds) produces the shared warm start, the best CE
run by dev score.  Every soft objective then trains ``restarts`` times from
that checkpoint with different shuffling seeds.  Each cell decodes dev and
test with every decoder; the table reports, per row and decoder, the test
score of the restart with the best dev score under that decoder.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .config import build, config_hash
from .decoding import DECODERS
from .errors import ConfigError
from .model import TaggerModel, load_checkpoint, save_checkpoint
from .runs import (
    ModelConfig,
    TaskConfig,
    load_task,
    manifest,
    write_csv,
    write_json,
)
from .training import AlphaSchedule, TrainConfig, evaluate_decoders, metric_columns, train

log = logging.getLogger(__name__)

OBJECTIVE_ROWS = {
    "ce": ("ce", None),
    "soft_hinge_const": ("soft_hinge", "constant"),
    "soft_hinge_anneal": ("soft_hinge", "anneal"),
    "soft_direct_const": ("soft_direct", "constant"),
    "soft_direct_anneal": ("soft_direct", "anneal"),
}
ROW_TITLES = {
    "ce": "CE",
    "soft_hinge_const": "soft hinge, alpha=1",
    "soft_hinge_anneal": "soft hinge, annealed alpha",
    "soft_direct_const": "soft direct loss, alpha=1",
    "soft_direct_anneal": "soft direct loss, annealed alpha",
}


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    ce: TrainConfig = field(default_factory=lambda: TrainConfig(objective="ce"))
    soft: TrainConfig = field(default_factory=lambda: TrainConfig(objective="soft_direct"))
    anneal: AlphaSchedule = field(default_factory=AlphaSchedule.geometric)
    constant_alpha: float = 1.0
    objectives: list = field(default_factory=lambda: list(OBJECTIVE_ROWS))
    decoders: list = field(default_factory=lambda: list(DECODERS))
    decode_alpha: float | None = None
    restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        if not self.decoders:
            raise ConfigError("at least one decoder must be listed")
        for d in self.decoders:
            if d not in DECODERS:
                raise ConfigError(f"unknown decoder {d!r}")
        for o in self.objectives:
            if o not in OBJECTIVE_ROWS:
                raise ConfigError(f"unknown objective row {o!r}; expected one of {list(OBJECTIVE_ROWS)}")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if not self.constant_alpha > 0:
            raise ConfigError("constant_alpha must be positive")

    @classmethod
    def from_dict(cls, data: dict, path: str = "config") -> "ExperimentConfig":
        train_nested = {"alpha": AlphaSchedule}
        cfg = build(cls, {k: v for k, v in data.items() if k not in ("ce", "soft", "task", "model", "anneal")},
                    path)
        if "task" in data:
            cfg.task = build(TaskConfig, data["task"], f"{path}.task")
        if "model" in data:
            cfg.model = build(ModelConfig, data["model"], f"{path}.model")
        if "anneal" in data:
            cfg.anneal = build(AlphaSchedule, data["anneal"], f"{path}.anneal")
        if "ce" in data:
            cfg.ce = build(TrainConfig, {"objective": "ce", **data["ce"]}, f"{path}.ce", train_nested)
        if "soft" in data:
            cfg.soft = build(TrainConfig, {"objective": "soft_direct", **data["soft"]}, f"{path}.soft",
                             train_nested)
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def cell_config(self, row: str, restart: int) -> TrainConfig:
        objective, schedule = OBJECTIVE_ROWS[row]
        base = self.ce if objective == "ce" else self.soft
        alpha = base.alpha
        if schedule == "constant":
            alpha = AlphaSchedule.constant(self.constant_alpha)
        elif schedule == "anneal":
            alpha = self.anneal
        return dataclasses.replace(base, objective=objective, alpha=alpha, seed=self.seed + restart,
                                   eval_decoders=tuple(d for d in base.eval_decoders if d != "soft_beam"))


@dataclass
class CellResult:
    row: str
    restart: int
    seed: int
    best_epoch: int
    alpha: float
    metrics: dict  # split -> decoder -> {accuracy, macro_f1}
    directory: str


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SOFTBEAM_THREADS", "1")))
    except ValueError:
        raise ConfigError("SOFTBEAM_THREADS must be an integer") from None


def _strip(metrics: dict) -> dict:
    return {d: {"accuracy": m["accuracy"], "macro_f1": m["macro_f1"]} for d, m in metrics.items()}


def run_cell(cfg: ExperimentConfig, row: str, restart: int, out_dir: str,
             warm_path: str | None = None, parts: dict | None = None) -> CellResult:
    """Train one grid cell, write its artifacts and evaluate it on dev and test."""
    parts = parts or load_task(cfg.task)
    train_cfg = cfg.cell_config(row, restart)
    warm = load_checkpoint(warm_path) if warm_path else None
    cell_dir = Path(out_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    state = train(parts["train"], parts["dev"], train_cfg, warm_start=warm,
                  sizes=None if warm else cfg.model.sizes(parts["train"]))
    decoders = list(dict.fromkeys(train_cfg.eval_decoders + (train_cfg.selection_decoder,)))
    write_csv(cell_dir / "metrics.csv", state.history, metric_columns(decoders))
    write_csv(cell_dir / "timings.csv", state.timings, ["epoch", "seconds"])
    model = state.best_model
    model.input_vocab = list(parts["train"].input_vocab)
    model.label_vocab = list(parts["train"].label_vocab)
    save_checkpoint(model, cell_dir / "checkpoint.json")
    alpha = state.history[state.best_epoch]["alpha"]
    decode_alpha = cfg.decode_alpha or alpha
    metrics = {split: _strip(evaluate_decoders(model, parts[split], cfg.decoders, train_cfg.k, decode_alpha))
               for split in ("dev", "test") if split in parts}
    result = CellResult(row, restart, train_cfg.seed, state.best_epoch, alpha, metrics, str(cell_dir))
    write_json(cell_dir / "manifest.json", manifest(
        cfg.to_dict(), train_cfg.seed, "experiment-cell", row=row, restart=restart,
        train_config=train_cfg.to_dict(), warm_start=warm_path, best_epoch=state.best_epoch,
        decode_alpha=decode_alpha))
    write_json(cell_dir / "eval.json", metrics)
    return result


def _cell_job(args):
    return run_cell(*args)


def select_best(results: list[CellResult], row: str, decoder: str, metric: str) -> CellResult:
    """Restart with the best dev score under ``decoder`` (earliest restart on ties)."""
    cells = [r for r in results if r.row == row]
    return max(cells, key=lambda r: (r.metrics["dev"][decoder][metric], -r.restart))


def run_experiment(cfg: ExperimentConfig, out_dir, warm_start: str | None = None) -> dict:
    """Run the grid; returns the summary written to ``summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    parts = load_task(cfg.task)
    metric = cfg.soft.early_stop_metric
    results: list[CellResult] = []
    threads = _threads()
    ce_rows = ["ce"] if "ce" in cfg.objectives or warm_start is None else []

    # stage 1: CE, which also supplies the shared warm start
    if ce_rows:
        jobs = [(cfg, "ce", r, str(out / "ce" / f"restart{r}"), None, None) for r in range(cfg.restarts)]
        results += _run_jobs(jobs, threads, parts)
    if warm_start is None:
        ce_cells = [r for r in results if r.row == "ce"]
        best_ce = max(ce_cells, key=lambda r: (r.metrics["dev"][_ce_decoder(cfg)][metric], -r.restart))
        warm_start = str(Path(best_ce.directory) / "checkpoint.json")
    warm_model: TaggerModel = load_checkpoint(warm_start)
    warm_dev = _strip(evaluate_decoders(warm_model, parts["dev"], cfg.decoders, cfg.soft.k,
                                        cfg.decode_alpha or cfg.constant_alpha))

    # stage 2: soft objectives from the shared warm start
    soft_rows = [o for o in cfg.objectives if o != "ce"]
    jobs = [(cfg, row, r, str(out / row / f"restart{r}"), warm_start, None)
            for row in soft_rows for r in range(cfg.restarts)]
    results += _run_jobs(jobs, threads, parts)

    raw = []
    for res in results:
        for split, by_decoder in res.metrics.items():
            for decoder, m in by_decoder.items():
                raw.append({"row": res.row, "restart": res.restart, "seed": res.seed, "split": split,
                            "decoder": decoder, "best_epoch": res.best_epoch, "alpha": res.alpha,
                            "accuracy": m["accuracy"], "macro_f1": m["macro_f1"]})
    write_csv(out / "results.csv", raw,
              ["row", "restart", "seed", "split", "decoder", "best_epoch", "alpha", "accuracy", "macro_f1"])

    rows = [o for o in cfg.objectives if any(r.row == o for r in results)]
    table = []
    for row in rows:
        entry = {"row": row, "title": ROW_TITLES[row]}
        for decoder in cfg.decoders:
            best = select_best(results, row, decoder, metric)
            entry[f"{decoder}_dev"] = best.metrics["dev"][decoder][metric]
            if "test" in best.metrics:
                entry[f"{decoder}_test"] = best.metrics["test"][decoder][metric]
            entry[f"{decoder}_restart"] = best.restart
        table.append(entry)
    columns = ["row"] + [f"{d}_{s}" for d in cfg.decoders for s in ("dev", "test")]
    write_csv(out / "table.csv", table, columns)
    (out / "table.md").write_text(markdown_table(table, cfg.decoders, metric), encoding="utf-8")

    summary = {
        "metric": metric,
        "warm_start": warm_start,
        "warm_start_dev": warm_dev,
        "ce_decoder_gap": _gap(warm_dev, metric),
        "table": table,
        "config_hash": config_hash(cfg.to_dict()),
    }
    write_json(out / "summary.json", summary)
    write_json(out / "manifest.json", manifest(cfg.to_dict(), cfg.seed, "experiment"))
    return summary


def _ce_decoder(cfg: ExperimentConfig) -> str:
    return cfg.ce.selection_decoder


def _gap(dev: dict, metric: str) -> dict | None:
    """CE warm start: hard beam minus greedy on dev (positive means beam helps)."""
    if "greedy" not in dev or "hard_beam" not in dev:
        return None
    return {"greedy": dev["greedy"][metric], "hard_beam": dev["hard_beam"][metric],
            "beam_minus_greedy": dev["hard_beam"][metric] - dev["greedy"][metric]}


def _run_jobs(jobs, threads: int, parts: dict) -> list[CellResult]:
    if threads == 1 or len(jobs) <= 1:
        return [run_cell(*job[:5], parts) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        return list(pool.map(_cell_job, jobs))


def markdown_table(table: list[dict], decoders, metric: str) -> str:
    head = "| objective | " + " | ".join(f"{d} dev | {d} test" for d in decoders) + " |"
    sep = "|---|" + "---|---|" * len(decoders)
    lines = [f"Best-dev restart per cell, {metric} in percent.", "", head, sep]
    for entry in table:
        cells = []
        for d in decoders:
            for split in ("dev", "test"):
                v = entry.get(f"{d}_{split}")
                cells.append("" if v is None else f"{100 * v:.2f}")
        lines.append(f"| {entry['title']} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"

