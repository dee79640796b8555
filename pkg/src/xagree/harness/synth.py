"""Toy tasks with a known, strict importance ranking per instance.

Each instance holds a few trigger words with signed weights among noise
words.  The label is 1 when the weights of the present triggers sum to a
positive value, else 0.  The reference ranking orders present triggers by
absolute weight and ties every other token last.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..errors import ConfigError, ContractError
from .data import write_jsonl

DEFAULT_TRIGGERS = {
    "excellent": 3.0,
    "awful": -2.5,
    "good": 2.0,
    "bad": -1.5,
    "nice": 1.0,
    "poor": -0.5,
}


@dataclass
class SyntheticTaskSpec:
    triggers: dict = field(default_factory=lambda: dict(DEFAULT_TRIGGERS))
    vocab_size: int = 40  # noise words
    min_len: int = 4
    max_len: int = 8
    max_triggers: int = 2
    noise: str = "uniform"  # or "zipf"
    pair: bool = False
    train_size: int = 1200
    val_size: int = 300
    test_size: int = 300
    max_retries: int = 100

    def __post_init__(self):
        if not self.triggers:
            raise ConfigError("at least one trigger is required")
        if any(w == 0 for w in self.triggers.values()):
            raise ConfigError("trigger weights must be nonzero")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.max_triggers < 1:
            raise ConfigError("max_triggers must be >= 1")
        if self.noise not in ("uniform", "zipf"):
            raise ConfigError(f"unknown noise distribution {self.noise!r}")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")

    @property
    def strict(self) -> bool:
        mags = [abs(w) for w in self.triggers.values()]
        return len(set(mags)) == len(mags)

    def noise_words(self) -> list:
        return [f"w{i:03d}" for i in range(self.vocab_size)]

    def to_dict(self) -> dict:
        return asdict(self)


def label_of(tokens: Sequence[str], triggers: dict) -> Optional[int]:
    """Trigger rule; None when the present weights sum to zero."""
    total = sum(triggers[t] for t in set(tokens) if t in triggers)
    if total == 0:
        return None
    return int(total > 0)


def reference_ranks(tokens: Sequence[str], triggers: dict) -> list:
    """Rank per token: present triggers 1..m by |weight| descending, rest m+1."""
    present = sorted({t for t in tokens if t in triggers}, key=lambda t: (-abs(triggers[t]), t))
    rank = {t: i + 1 for i, t in enumerate(present)}
    last = len(present) + 1
    return [rank.get(t, last) for t in tokens]


def _noise_probs(spec: SyntheticTaskSpec) -> np.ndarray:
    if spec.noise == "uniform":
        return np.full(spec.vocab_size, 1.0 / spec.vocab_size)
    w = 1.0 / np.arange(1, spec.vocab_size + 1)
    return w / w.sum()


def _draw(spec: SyntheticTaskSpec, rng: np.random.Generator, probs: np.ndarray):
    names = sorted(spec.triggers)
    noise = spec.noise_words()
    n_seg = 2 if spec.pair else 1
    for _ in range(spec.max_retries):
        k = int(rng.integers(1, min(spec.max_triggers, len(names)) + 1))
        chosen = [names[i] for i in rng.choice(len(names), size=k, replace=False)]
        segs = [
            [noise[i] for i in rng.choice(spec.vocab_size, size=int(rng.integers(spec.min_len, spec.max_len + 1)), p=probs)]
            for _ in range(n_seg)
        ]
        for trig in chosen:
            seg = segs[int(rng.integers(n_seg))]
            seg[int(rng.integers(len(seg)))] = trig
        flat = [t for s in segs for t in s]
        if len(set(flat) & set(chosen)) != len(chosen):
            continue  # a trigger overwrote another
        label = label_of(flat, spec.triggers)
        if label is not None:
            return segs, label
    raise ContractError("could not draw a label-unambiguous instance; check trigger weights")


def synth_generate(spec: SyntheticTaskSpec, seed: int, out_dir=None) -> dict:
    """Generate train/val/test splits and per-instance reference rankings.

    Returns ``{split: {"records": [...], "references": [...]}}``; with
    ``out_dir`` also writes ``{split}.jsonl``, ``{split}_reference.jsonl`` and
    ``spec.json``.  Reference tokens follow the layout of the loaded
    instance (``first [SEP] second`` for pairs; the separator ranks last).
    """
    rng = np.random.default_rng(seed)
    probs = _noise_probs(spec)
    result = {}
    for split, size in (("train", spec.train_size), ("val", spec.val_size), ("test", spec.test_size)):
        records, refs = [], []
        for i in range(size):
            segs, label = _draw(spec, rng, probs)
            rec = {"text": " ".join(segs[0]), "label": label}
            tokens = list(segs[0])
            if spec.pair:
                rec["text_pair"] = " ".join(segs[1])
                tokens = [*segs[0], "[SEP]", *segs[1]]
            records.append(rec)
            refs.append({"index": i, "tokens": tokens, "ranks": reference_ranks(tokens, spec.triggers)})
        result[split] = {"records": records, "references": refs}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for split, payload in result.items():
            write_jsonl(out / f"{split}.jsonl", payload["records"])
            write_jsonl(out / f"{split}_reference.jsonl", payload["references"])
        (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return result
