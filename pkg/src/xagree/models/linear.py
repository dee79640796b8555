"""Bag-of-embeddings linear classifier.

``logits = sum_t E[id_t] @ W + b``.  Every attribution method has a closed
form on this model, which makes it the reference point for cross-method
consistency checks.  With a one-dimensional embedding and ``W = [[0, 1]]`` the
embedding table directly holds additive per-token weights for class 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..tensor import Tensor
from .base import Batch, Classifier, TokenSequence, pack_segments


@dataclass
class LinearConfig:
    vocab_size: int
    num_classes: int = 2
    embedding_dim: int = 8
    pad_id: int = 0


class LinearBagClassifier(Classifier):
    kind = "linear"
    default_lr = 1e-2

    def reset_parameters(self, seed: int) -> None:
        cfg = self.config
        rng = np.random.default_rng(seed)
        lim = math.sqrt(6.0 / (cfg.embedding_dim + cfg.num_classes))
        self.params = {
            "embedding": Tensor(rng.normal(size=(cfg.vocab_size, cfg.embedding_dim)), requires_grad=True),
            "w": Tensor(rng.uniform(-lim, lim, size=(cfg.embedding_dim, cfg.num_classes)), requires_grad=True),
            "b": Tensor(np.zeros(cfg.num_classes), requires_grad=True),
        }

    @classmethod
    def additive(cls, token_weights: np.ndarray, pad_id: int = 0) -> "LinearBagClassifier":
        """Two-class model whose class-1 logit is the sum of per-token weights."""
        weights = np.asarray(token_weights, dtype=np.float64)
        model = cls(LinearConfig(vocab_size=len(weights), num_classes=2, embedding_dim=1, pad_id=pad_id))
        model.params["embedding"].data = weights.reshape(-1, 1).copy()
        model.params["w"].data = np.array([[0.0, 1.0]])
        model.params["b"].data = np.zeros(2)
        return model

    def encode(self, seqs: Sequence[TokenSequence]) -> Batch:
        return pack_segments([[list(s.ids)] for s in seqs], self.pad_id, [s.label for s in seqs])

    def input_tokens(self, seq: TokenSequence) -> list:
        return list(seq.tokens)

    def forward_embedded(self, emb: Tensor, batch: Batch, capture: bool = False):
        mask = batch.mask()[:, None, :].astype(np.float64)
        pooled = (Tensor(mask) @ emb).reshape(batch.size, emb.shape[-1])
        return pooled @ self.params["w"] + self.params["b"], []

    def forward(self, seq: TokenSequence):
        return self.logits(self.encode([seq]))[0], None
