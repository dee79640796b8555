"""Dataset ingestion, vocabulary construction and instance sampling."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ..errors import ConfigError, ParseError, SchemaError
from ..models.base import SEP, UNK, TokenSequence
from ..models.vocab import Vocabulary

log = logging.getLogger(__name__)

TASKS = ("single", "pair")


def tokenize(text: str) -> list:
    return text.lower().split()


@dataclass
class Dataset:
    """Instances that survived the length filter, plus retention accounting."""

    instances: list
    instances_in: int
    instances_filtered: int
    path: str = ""

    @property
    def instances_retained(self) -> int:
        return len(self.instances)

    @property
    def retention(self) -> float:
        return self.instances_retained / self.instances_in if self.instances_in else 1.0

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, i):
        return self.instances[i]

    def index(self, vocab: Vocabulary) -> "Dataset":
        """Re-map every instance's ids through ``vocab``."""
        seqs = [
            TokenSequence(s.tokens, vocab.ids(s.tokens), s.label, s.pair_boundary)
            for s in self.instances
        ]
        return Dataset(seqs, self.instances_in, self.instances_filtered, self.path)

    def stats(self) -> dict:
        return {
            "path": self.path,
            "instances_in": self.instances_in,
            "instances_retained": self.instances_retained,
            "instances_filtered": self.instances_filtered,
            "retention": self.retention,
        }


def make_sequence(first: Sequence[str], second: Optional[Sequence[str]], label: int,
                  vocab: Optional[Vocabulary] = None) -> TokenSequence:
    if second is None:
        tokens = list(first)
        boundary = None
    else:
        tokens = [*first, SEP, *second]
        boundary = len(first) + 1
    if vocab is None:
        ids = [1 if t != SEP else 3 for t in tokens]
    else:
        ids = vocab.ids(tokens)
    return TokenSequence(tokens, ids, label, boundary)


def load_dataset(path, task: str, max_tokens: Optional[int] = 240,
                 vocab: Optional[Vocabulary] = None,
                 num_classes: Optional[int] = None) -> Dataset:
    """Read a JSONL file of ``{"text", "text_pair"?, "label"}`` records.

    Text is lowercased and split on whitespace.  Instances whose token count
    (combined count for pairs) exceeds ``max_tokens`` are dropped.  Without a
    vocabulary every id is ``[UNK]``; call :meth:`Dataset.index` later.
    """
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    seqs, n_in, n_filtered = [], 0, 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(rec, dict) or "text" not in rec or "label" not in rec:
                raise ParseError("record needs 'text' and 'label'", lineno)
            label = rec["label"]
            if isinstance(label, bool) or not isinstance(label, int) or label < 0:
                raise SchemaError(f"line {lineno}: label {label!r} is not a non-negative integer")
            if num_classes is not None and label >= num_classes:
                raise SchemaError(f"line {lineno}: label {label} outside [0, {num_classes})")
            first = tokenize(str(rec["text"]))
            second = None
            if task == "pair":
                if rec.get("text_pair") is None:
                    raise SchemaError(f"line {lineno}: pair task record lacks 'text_pair'")
                second = tokenize(str(rec["text_pair"]))
            n_in += 1
            count = len(first) + (len(second) if second is not None else 0)
            if (max_tokens is not None and count > max_tokens) or not first or (second is not None and not second):
                n_filtered += 1
                continue
            seqs.append(make_sequence(first, second, label, vocab))
    ds = Dataset(seqs, n_in, n_filtered, str(path))
    log.info("loaded %s: %d/%d retained", path, ds.instances_retained, n_in)
    return ds


def build_vocab(split: Iterable[TokenSequence], min_count: int = 1) -> Vocabulary:
    """Frequency-descending, then lexicographic; rarer tokens map to [UNK]."""
    counts = Counter()
    for seq in split:
        counts.update(t for t in seq.tokens if t not in (SEP, UNK))
    if not counts:
        raise ConfigError("cannot build a vocabulary from an empty split")
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def sample_instances(n_available: int, n: int, seed: int) -> list:
    """Uniform sample of ``n`` indices without replacement, sorted ascending."""
    if n > n_available or n < 0:
        raise ConfigError(f"cannot sample {n} instances from {n_available}")
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(n_available, size=n, replace=False))


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
