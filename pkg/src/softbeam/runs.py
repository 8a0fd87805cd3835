"""Run artifacts: task loading, metrics CSVs and manifests."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .config import canonical_json, config_hash
from .data import TaggedCorpus, gen_longrange, gen_skewed, load_tsv, split_corpus
from .errors import ConfigError
from .model import ModelSizes

GENERATORS = {"longrange": gen_longrange, "skewed": gen_skewed}


@dataclass
class TaskConfig:
    """Either a generator with parameters or three TSV paths."""

    generator: str | None = "longrange"
    params: dict = field(default_factory=dict)
    split_seed: int = 0
    train: str | None = None
    dev: str | None = None
    test: str | None = None

    def __post_init__(self):
        if self.generator is None:
            if not (self.train and self.dev):
                raise ConfigError("file-based tasks need at least train and dev paths")
        elif self.generator not in GENERATORS:
            raise ConfigError(f"generator must be one of {sorted(GENERATORS)}, got {self.generator!r}")


@dataclass
class ModelConfig:
    hidden: int = 64
    label_dim: int = 8
    input_dim: int = 32
    enc_hidden: int | None = None

    def sizes(self, corpus: TaggedCorpus) -> ModelSizes:
        return ModelSizes(len(corpus.input_vocab), len(corpus.label_vocab), self.hidden, self.label_dim,
                          self.input_dim, self.enc_hidden)


def load_task(task: TaskConfig) -> dict[str, TaggedCorpus]:
    """train/dev/test corpora sharing the training vocabularies."""
    if task.generator is not None:
        try:
            corpus = GENERATORS[task.generator](**task.params)
        except TypeError as exc:
            raise ConfigError(f"task.params: {exc}") from None
        return split_corpus(corpus, task.split_seed)
    train = load_tsv(task.train)
    parts = {"train": train}
    for name in ("dev", "test"):
        path = getattr(task, name)
        if path:
            parts[name] = load_tsv(path, train.input_vocab, train.label_vocab)
    return parts


def format_value(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def write_csv(path, rows, columns) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row.get(c, "")) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    if isinstance(obj, tuple):
        return list(obj)
    if hasattr(obj, "tolist"):
        return obj.tolist()
    raise TypeError(f"not serialisable: {type(obj).__name__}")


def manifest(config: dict, seed: int, command: str, **extra) -> dict:
    """Everything needed to reproduce an artifact: config, its hash, seed and code version."""
    config = json.loads(canonical_json(config))
    return {"command": command, "config": config, "config_hash": config_hash(config), "seed": seed,
            "version": __version__, **extra}
