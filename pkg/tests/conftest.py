import math

import numpy as np
import pytest

from xagree.harness.data import make_sequence
from xagree.models import (
    BiLSTMClassifier,
    BiLSTMConfig,
    LinearBagClassifier,
    LinearConfig,
    TokenSequence,
    TransformerClassifier,
    TransformerConfig,
    Vocabulary,
)
from xagree.models.base import Batch
from xagree.tensor import Tensor

WORDS = ["a", "b", "c", "d", "e", "f", "g", "h"]


class TanhMLPBag(LinearBagClassifier):
    """Masked sum of embeddings, then a tanh hidden layer: linear plus elementwise ops only."""

    kind = "tanh_mlp"

    def __init__(self, vocab_size, dim=4, hidden=6, seed=0):
        super().__init__(LinearConfig(vocab_size=vocab_size, embedding_dim=dim), seed=seed)
        rng = np.random.default_rng(seed + 100)
        self.params["w1"] = Tensor(rng.normal(scale=0.7, size=(dim, hidden)), requires_grad=True)
        self.params["b1"] = Tensor(rng.normal(scale=0.3, size=hidden), requires_grad=True)
        self.params["w"] = Tensor(rng.normal(size=(hidden, 2)), requires_grad=True)

    def forward_embedded(self, emb, batch, capture=False):
        mask = batch.mask()[:, None, :].astype(np.float64)
        pooled = (Tensor(mask) @ emb).reshape(batch.size, emb.shape[-1])
        h = (pooled @ self.params["w1"] + self.params["b1"]).tanh()
        return h @ self.params["w"] + self.params["b"], []


class FunctionModel(LinearBagClassifier):
    """Two-class 'model' whose class-1 probability is an arbitrary function of the keep mask.

    A token counts as present when its id differs from padding.
    """

    kind = "function"

    def __init__(self, vocab_size, fn):
        super().__init__(LinearConfig(vocab_size=vocab_size, embedding_dim=2), seed=0)
        self.fn = fn

    def predict_proba(self, batch: Batch) -> np.ndarray:
        present = (batch.ids != self.pad_id).astype(np.float64)
        p1 = np.array([self.fn(row) for row in present], dtype=np.float64)
        return np.stack([1.0 - p1, p1], axis=1)

    def logits(self, batch: Batch) -> np.ndarray:
        p = np.clip(self.predict_proba(batch), 1e-12, 1.0)
        return np.log(p)


@pytest.fixture
def vocab():
    return Vocabulary(WORDS)


def seq_of(vocab, words, second=None, label=1):
    return make_sequence(list(words), None if second is None else list(second), label, vocab)


@pytest.fixture
def tiny_transformer(vocab):
    cfg = TransformerConfig(vocab_size=len(vocab), layers=2, heads=2, model_dim=8, ff_dim=12, max_len=32)
    return TransformerClassifier(cfg, seed=3)


@pytest.fixture
def tiny_bilstm(vocab):
    return BiLSTMClassifier(BiLSTMConfig(vocab_size=len(vocab), hidden_dim=5, embedding_dim=6), seed=4)


@pytest.fixture
def tiny_bilstm_pair(vocab):
    return BiLSTMClassifier(BiLSTMConfig(vocab_size=len(vocab), hidden_dim=5, embedding_dim=6, pair=True), seed=5)


@pytest.fixture
def linear_model(vocab):
    return LinearBagClassifier(LinearConfig(vocab_size=len(vocab), embedding_dim=3), seed=7)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
