"""Single-layer BiLSTM encoder with query-less additive attention.

Pair instances are embedded, encoded and attended separately; the decoder
reads ``[c1, c2, |c1 - c2|, c1 * c2]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ConfigError, LengthError
from ..tensor import Tensor, absolute, concat, sigmoid, softmax, stack, tanh
from .base import AttentionRecord, Batch, Classifier, TokenSequence, pack_segments


@dataclass
class BiLSTMConfig:
    vocab_size: int
    num_classes: int = 2
    hidden_dim: int = 64
    embedding_dim: int = 64
    pad_id: int = 0
    pair: bool = False

    def __post_init__(self):
        if self.hidden_dim < 1 or self.embedding_dim < 1:
            raise ConfigError("hidden_dim and embedding_dim must be >= 1")


class BiLSTMClassifier(Classifier):
    kind = "bilstm"
    default_lr = 1e-2

    def reset_parameters(self, seed: int) -> None:
        cfg = self.config
        rng = np.random.default_rng(seed)
        e, h = cfg.embedding_dim, cfg.hidden_dim

        def dense(fan_in, fan_out):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_in, fan_out))

        p = {"embedding": rng.normal(0.0, 1.0 / math.sqrt(e), size=(cfg.vocab_size, e))}
        for direction in ("fw", "bw"):
            bias = np.zeros(4 * h)
            bias[h:2 * h] = 1.0  # forget gate
            p[f"{direction}_w_ih"] = dense(e, 4 * h)
            p[f"{direction}_w_hh"] = dense(h, 4 * h)
            p[f"{direction}_b"] = bias
        p["att_w"] = dense(2 * h, h)
        p["att_b"] = np.zeros(h)
        p["att_v"] = dense(h, 1)
        dec_in = 8 * h if cfg.pair else 2 * h
        p["dec_w"] = dense(dec_in, cfg.num_classes)
        p["dec_b"] = np.zeros(cfg.num_classes)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    def _segments(self, seq: TokenSequence) -> list:
        self._check_ids(seq)
        segs = [list(seq.ids[lo:hi]) for lo, hi in seq.segments()]
        if bool(self.config.pair) != seq.is_pair:
            raise ConfigError("BiLSTM pair setting does not match the instance")
        if any(not s for s in segs):
            raise LengthError("empty sequence segment")
        return segs

    def encode(self, seqs: Sequence[TokenSequence]) -> Batch:
        return pack_segments([self._segments(s) for s in seqs], self.pad_id, [s.label for s in seqs])

    def input_tokens(self, seq: TokenSequence) -> list:
        return [t for lo, hi in seq.segments() for t in seq.tokens[lo:hi]]

    def _lstm(self, x: Tensor, direction: str) -> Tensor:
        p = self.params
        B, n, _ = x.shape
        h_dim = self.config.hidden_dim
        xw = x @ p[f"{direction}_w_ih"] + p[f"{direction}_b"]
        w_hh = p[f"{direction}_w_hh"]
        h = Tensor(np.zeros((B, h_dim)))
        c = Tensor(np.zeros((B, h_dim)))
        outputs = []
        for t in range(n):
            gates = xw[:, t, :] + h @ w_hh
            i = sigmoid(gates[:, :h_dim])
            f = sigmoid(gates[:, h_dim:2 * h_dim])
            g = tanh(gates[:, 2 * h_dim:3 * h_dim])
            o = sigmoid(gates[:, 3 * h_dim:])
            c = f * c + i * g
            h = o * tanh(c)
            outputs.append(h)
        return stack(outputs, axis=1)

    def _encode_segment(self, x: Tensor, lengths: np.ndarray, mask: np.ndarray):
        B, n, _ = x.shape
        # reverse each row within its own length so padding never feeds real states
        t = np.arange(n)[None, :]
        rev = np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
        rows = np.arange(B)[:, None]
        h_fw = self._lstm(x, "fw")
        h_bw = self._lstm(x[rows, rev], "bw")[rows, rev]
        hidden = concat([h_fw, h_bw], axis=-1)
        p = self.params
        scores = (tanh(hidden @ p["att_w"] + p["att_b"]) @ p["att_v"]).reshape(B, n)
        if self.attention_activation == "uniform":
            alpha = Tensor(mask / mask.sum(axis=-1, keepdims=True))
        else:
            alpha = softmax(scores, axis=-1, mask=mask)
        context = (alpha.reshape(B, 1, n) @ hidden).reshape(B, 2 * self.config.hidden_dim)
        return context, alpha, hidden

    def forward_embedded(self, emb: Tensor, batch: Batch, capture: bool = False):
        mask = batch.mask()
        contexts, captured = [], []
        for s, (lo, hi) in enumerate(batch.segments):
            ctx, alpha, hidden = self._encode_segment(emb[:, lo:hi, :], batch.lengths[:, s], mask[:, lo:hi])
            contexts.append(ctx)
            if capture:
                captured.append((alpha.data, hidden.data))
        if len(contexts) == 1:
            features = contexts[0]
        else:
            c1, c2 = contexts
            features = concat([c1, c2, absolute(c1 - c2), c1 * c2], axis=-1)
        p = self.params
        return features @ p["dec_w"] + p["dec_b"], captured

    def forward(self, seq: TokenSequence):
        batch = self.encode([seq])
        logits, captured = self.forward_batch(batch, capture=True)
        record = AttentionRecord(
            kind="bilstm",
            tokens=self.input_tokens(seq),
            weights=[np.array(a[0]) for a, _ in captured],
            hidden=[np.array(h[0]) for _, h in captured],
        )
        return logits.data[0], record


def forward_bilstm(model: BiLSTMClassifier, seq: TokenSequence):
    """Logits and attention weight vector(s) for one instance."""
    return model.forward(seq)
