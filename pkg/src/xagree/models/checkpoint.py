"""Model checkpoints: an ``.npz`` archive of float64 parameters plus a JSON header."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..errors import SchemaError
from .bilstm import BiLSTMClassifier, BiLSTMConfig
from .linear import LinearBagClassifier, LinearConfig
from .transformer import TransformerClassifier, TransformerConfig
from .vocab import Vocabulary

FORMAT_VERSION = 1

ARCHITECTURES = {
    "transformer": (TransformerClassifier, TransformerConfig),
    "bilstm": (BiLSTMClassifier, BiLSTMConfig),
    "linear": (LinearBagClassifier, LinearConfig),
}


def build_model(kind: str, config: dict, seed: int = 0):
    try:
        cls, cfg_cls = ARCHITECTURES[kind]
    except KeyError:
        raise SchemaError(f"unknown model kind {kind!r}") from None
    return cls(cfg_cls(**config), seed=seed)


def save_checkpoint(model, path) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "config": asdict(model.config),
        "seed": model.seed,
        "attention_activation": model.attention_activation,
        "vocab": list(model.vocab.tokens) if model.vocab is not None else None,
    }
    arrays = {f"param/{k}": v.data for k, v in model.params.items()}
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path):
    with np.load(Path(path), allow_pickle=False) as archive:
        header = json.loads(str(archive["header"]))
        if header.get("format_version") != FORMAT_VERSION:
            raise SchemaError(f"unsupported checkpoint version {header.get('format_version')}")
        model = build_model(header["kind"], header["config"], header["seed"])
        model.attention_activation = header["attention_activation"]
        for key in archive.files:
            if key.startswith("param/"):
                model.params[key[len("param/"):]].data = np.array(archive[key], dtype=np.float64)
    if header["vocab"] is not None:
        model.vocab = Vocabulary(header["vocab"])
    return model
