"""Tagged corpora: TSV I/O, synthetic task generators, splits and metrics."""

from __future__ import annotations

import hashlib
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError, VocabularyError

UNK = "<unk>"
START = "<s>"
DEFAULT_LABEL = "O"


class Vocab:
    """Stable string <-> id mapping in first-seen order."""

    def __init__(self, items=(), unk: str | None = None):
        self.itos: list[str] = []
        self.stoi: dict[str, int] = {}
        self.unk = unk
        if unk is not None:
            self.add(unk)
        for item in items:
            self.add(item)

    def add(self, item: str) -> int:
        if item not in self.stoi:
            self.stoi[item] = len(self.itos)
            self.itos.append(item)
        return self.stoi[item]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, item):
        return item in self.stoi

    def __iter__(self):
        return iter(self.itos)

    def index(self, item: str) -> int:
        try:
            return self.stoi[item]
        except KeyError:
            if self.unk is not None:
                return self.stoi[self.unk]
            raise VocabularyError(f"unknown symbol {item!r}") from None

    def encode(self, items) -> np.ndarray:
        return np.array([self.index(i) for i in items], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.itos[int(i)] for i in ids]


@dataclass
class TaggedCorpus:
    sentences: list[tuple[list[str], list[str]]]
    input_vocab: Vocab = field(default_factory=lambda: Vocab(unk=UNK))
    label_vocab: Vocab = field(default_factory=Vocab)
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        for n, (tokens, labels) in enumerate(self.sentences):
            if len(tokens) != len(labels):
                raise InputError(f"sentence {n}: {len(tokens)} tokens but {len(labels)} labels")

    def __len__(self):
        return len(self.sentences)

    @classmethod
    def build(cls, sentences, manifest=None, label_order=()) -> "TaggedCorpus":
        """Corpus whose vocabularies are collected from ``sentences`` (first-seen order)."""
        inputs, labels = Vocab(unk=UNK), Vocab(label_order)
        for tokens, tags in sentences:
            for tok in tokens:
                inputs.add(tok)
            for tag in tags:
                labels.add(tag)
        return cls(list(sentences), inputs, labels, dict(manifest or {}))

    def with_vocab(self, input_vocab: Vocab, label_vocab: Vocab) -> "TaggedCorpus":
        return TaggedCorpus(self.sentences, input_vocab, label_vocab, self.manifest)

    def encoded(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Id arrays per sentence; OOV tokens map to UNK, unknown labels raise."""
        return [(self.input_vocab.encode(t), self.label_vocab.encode(y)) for t, y in self.sentences]

    def subset(self, indices) -> "TaggedCorpus":
        return TaggedCorpus([self.sentences[i] for i in indices], self.input_vocab, self.label_vocab,
                            dict(self.manifest))


# -- TSV -------------------------------------------------------------------


def load_tsv(path, input_vocab: Vocab | None = None, label_vocab: Vocab | None = None) -> TaggedCorpus:
    """Read ``token<TAB>label`` lines; blank lines separate sentences.

    Without vocabularies, ids are assigned in first-seen order.  With a
    given input vocabulary, unseen tokens map to its UNK entry.
    """
    sentences, tokens, labels = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                if tokens:
                    sentences.append((tokens, labels))
                    tokens, labels = [], []
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise ParseError(f"expected 'token<TAB>label', got {line!r}", line=lineno)
            tokens.append(parts[0])
            labels.append(parts[1])
    if tokens:
        sentences.append((tokens, labels))
    corpus = TaggedCorpus.build(sentences)
    if input_vocab is not None or label_vocab is not None:
        corpus = corpus.with_vocab(input_vocab or corpus.input_vocab, label_vocab or corpus.label_vocab)
    return corpus


def write_tsv(path, sentences) -> None:
    """Write (tokens, labels) pairs in the TSV layout read by :func:`load_tsv`."""
    with open(path, "w", encoding="utf-8") as fh:
        for n, (tokens, labels) in enumerate(sentences):
            if n:
                fh.write("\n")
            for tok, lab in zip(tokens, labels):
                fh.write(f"{tok}\t{lab}\n")


def write_corpus(path, corpus: TaggedCorpus) -> None:
    """TSV plus a sidecar ``<path>.json`` manifest with generator parameters."""
    write_tsv(path, corpus.sentences)
    Path(str(path) + ".json").write_text(json.dumps(corpus.manifest, indent=2, sort_keys=True), encoding="utf-8")


# -- splits ----------------------------------------------------------------


def split_of(index: int, seed: int, dev_frac: float = 0.1, test_frac: float = 0.1) -> str:
    h = hashlib.blake2b(f"{seed}:{index}".encode(), digest_size=8).digest()
    u = int.from_bytes(h, "big") / 2**64
    if u < test_frac:
        return "test"
    if u < test_frac + dev_frac:
        return "dev"
    return "train"


def split_corpus(corpus: TaggedCorpus, seed: int = 0, dev_frac=0.1, test_frac=0.1) -> dict[str, TaggedCorpus]:
    """Hash-based train/dev/test split on sentence index; vocabularies are shared."""
    parts = defaultdict(list)
    for i in range(len(corpus)):
        parts[split_of(i, seed, dev_frac, test_frac)].append(i)
    out = {}
    for name in ("train", "dev", "test"):
        sub = corpus.subset(parts[name])
        sub.manifest["split"] = name
        out[name] = sub
    return out


# -- synthetic tasks ---------------------------------------------------------


def _zipf(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def longrange_rules(n_inputs: int, n_labels: int, seed: int, n_agree: int = 5, lag: int = 3):
    """Lexical class and agreement shift per token for the long-range task."""
    if n_labels % n_agree:
        raise InputError(f"n_labels={n_labels} must be a multiple of n_agree={n_agree}")
    n_classes = n_labels // n_agree
    rng = np.random.default_rng([seed, 1])
    # tail-heavy class distribution over the token vocabulary
    lex = rng.choice(n_classes, size=n_inputs, p=_zipf(n_classes, 1.0))
    shift = rng.integers(0, n_agree, size=n_inputs)
    return {"lex": lex, "shift": shift, "n_agree": n_agree, "lag": lag}


def longrange_tag(token_ids, rules) -> list[int]:
    """The rule-following tagger: label = class(w_t) * A + agreement_t.

    ``agreement_t = (agreement_{t-lag} + shift(w_t)) mod A`` and
    ``agreement_t = shift(w_t)`` for the first ``lag`` positions.
    """
    A, lag = rules["n_agree"], rules["lag"]
    agree: list[int] = []
    out = []
    for t, w in enumerate(token_ids):
        prev = agree[t - lag] if t >= lag else 0
        a = (prev + int(rules["shift"][w])) % A
        agree.append(a)
        out.append(int(rules["lex"][w]) * A + a)
    return out


def gen_longrange(n: int = 5000, T_range=(5, 20), n_inputs: int = 100, n_labels: int = 50,
                  seed: int = 0, n_agree: int = 5, lag: int = 3) -> TaggedCorpus:
    """Long-range agreement task.

    Each label combines the lexical class of the current token with an
    agreement value carried from the label ``lag`` steps earlier, so the
    right tag needs the decoder's own history and not just the current word.
    """
    if min(n_inputs, n_labels) < 2:
        raise InputError("sizes must be >= 2")
    rules = longrange_rules(n_inputs, n_labels, seed, n_agree, lag)
    rng = np.random.default_rng([seed, 2])
    word_p = _zipf(n_inputs, 0.8)
    lo, hi = T_range
    sentences = []
    for _ in range(n):
        T = int(rng.integers(lo, hi + 1))
        ids = rng.choice(n_inputs, size=T, p=word_p)
        tags = longrange_tag(ids, rules)
        sentences.append(([f"w{i}" for i in ids], [f"L{t}" for t in tags]))
    manifest = {"generator": "longrange", "n": n, "T_range": list(T_range), "n_inputs": n_inputs,
                "n_labels": n_labels, "seed": seed, "n_agree": n_agree, "lag": lag}
    return TaggedCorpus.build(sentences, manifest, label_order=[f"L{t}" for t in range(n_labels)])


def skewed_labels(n_labels: int) -> list[str]:
    return [DEFAULT_LABEL] + [f"E{j}" for j in range(1, n_labels)]


def gen_skewed(n: int = 3750, T_range=(5, 20), n_labels: int = 10, n_plain: int = 60, n_names: int = 30,
               p_default: float = 0.85, seed: int = 0) -> TaggedCorpus:
    """NER-like task skewed toward the default label ``'O'``.

    An entity of type j starts with trigger token ``t<j>`` and continues with
    0-2 name tokens; every token of the span is labelled ``E<j>``.  Name tokens
    also occur outside spans (labelled ``'O'``), so their tag depends on
    context.  Spans start with probability ``(1-p)/(1+p)`` per free slot,
    which makes the expected share of ``'O'`` equal to ``p_default``.
    """
    if not 0.5 < p_default < 1:
        raise InputError("p_default must lie in (0.5, 1)")
    if n_labels < 2:
        raise InputError("sizes must be >= 2")
    rng = np.random.default_rng([seed, 3])
    q = (1 - p_default) / (1 + p_default)
    n_types = n_labels - 1
    type_p = _zipf(n_types, 0.7)
    lo, hi = T_range
    labels = skewed_labels(n_labels)
    sentences = []
    for _ in range(n):
        T = int(rng.integers(lo, hi + 1))
        toks, tags = [], []
        while len(toks) < T:
            if rng.random() < q:
                j = int(rng.choice(n_types, p=type_p)) + 1
                span = int(rng.integers(1, 4))
                toks.append(f"t{j}")
                for _ in range(span - 1):
                    toks.append(f"n{int(rng.integers(n_names))}")
                tags.extend([labels[j]] * span)
            elif rng.random() < 0.15:
                toks.append(f"n{int(rng.integers(n_names))}")
                tags.append(DEFAULT_LABEL)
            else:
                toks.append(f"p{int(rng.integers(n_plain))}")
                tags.append(DEFAULT_LABEL)
        sentences.append((toks[:T], tags[:T]))
    manifest = {"generator": "skewed", "n": n, "T_range": list(T_range), "n_labels": n_labels,
                "n_plain": n_plain, "n_names": n_names, "p_default": p_default, "seed": seed}
    return TaggedCorpus.build(sentences, manifest, label_order=labels)


# -- batching ----------------------------------------------------------------


def length_batches(lengths, batch_size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Group sentence indices into equal-length batches.

    Without ``rng`` the order is deterministic (by length, then index);
    with it, members and batch order are shuffled.
    """
    groups = defaultdict(list)
    for i, n in enumerate(lengths):
        groups[n].append(i)
    batches = []
    for n in sorted(groups):
        idx = np.array(groups[n], dtype=np.int64)
        if rng is not None:
            idx = rng.permutation(idx)
        for start in range(0, len(idx), batch_size):
            batches.append(idx[start : start + batch_size])
    if rng is not None:
        order = rng.permutation(len(batches))
        batches = [batches[i] for i in order]
    return batches


# -- evaluation --------------------------------------------------------------


def evaluate(pred, gold, default_label: str | None = DEFAULT_LABEL) -> dict:
    """Token accuracy and label-level macro F1 over the non-default labels.

    ``pred`` and ``gold`` are sequences of label sequences (strings or ids).
    Macro F1 averages over every non-default label seen in gold or
    predictions.
    """
    if len(pred) != len(gold):
        raise InputError(f"{len(pred)} predicted sentences vs {len(gold)} gold")
    tp, fp, fn = Counter(), Counter(), Counter()
    correct = total = 0
    for n, (p_seq, g_seq) in enumerate(zip(pred, gold)):
        if len(p_seq) != len(g_seq):
            raise InputError(f"sentence {n}: {len(p_seq)} predictions vs {len(g_seq)} gold labels")
        for p, g in zip(p_seq, g_seq):
            if p == g:
                correct += 1
                tp[g] += 1
            else:
                fp[p] += 1
                fn[g] += 1
            total += 1
    labels = sorted({*tp, *fp, *fn} - {default_label}, key=str)
    per_label = {}
    f1s = []
    for lab in labels:
        prec = tp[lab] / (tp[lab] + fp[lab]) if tp[lab] + fp[lab] else 0.0
        rec = tp[lab] / (tp[lab] + fn[lab]) if tp[lab] + fn[lab] else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per_label[str(lab)] = {"tp": tp[lab], "fp": fp[lab], "fn": fn[lab], "f1": f1}
        f1s.append(f1)
    return {
        "accuracy": correct / total if total else 0.0,
        "macro_f1": float(np.mean(f1s)) if f1s else 0.0,
        "tokens": total,
        "per_label": per_label,
    }
