"""Post-LN transformer encoder classifier pooled from the [CLS] position."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ConfigError, LengthError
from ..tensor import Tensor, gelu, layer_norm, softmax, tanh
from .base import CLS, AttentionRecord, Batch, Classifier, TokenSequence, pack_segments


@dataclass
class TransformerConfig:
    vocab_size: int
    num_classes: int = 2
    layers: int = 2
    heads: int = 4
    model_dim: int = 64
    ff_dim: int = 128
    max_len: int = 256
    cls_id: int = 2
    sep_id: int = 3
    pad_id: int = 0
    zero_init_output: bool = False

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if min(self.layers, self.heads, self.model_dim, self.ff_dim, self.vocab_size, self.max_len) < 1:
            raise ConfigError("transformer dimensions must be positive")


class TransformerClassifier(Classifier):
    kind = "transformer"
    default_lr = 1e-3

    def reset_parameters(self, seed: int) -> None:
        cfg = self.config
        rng = np.random.default_rng(seed)
        d, f = cfg.model_dim, cfg.ff_dim

        def dense(fan_in, fan_out):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_in, fan_out))

        p = {
            "embedding": rng.normal(0.0, 1.0, size=(cfg.vocab_size, d)),
            "position": rng.normal(0.0, 0.1, size=(cfg.max_len, d)),
            "emb_ln_g": np.ones(d),
            "emb_ln_b": np.zeros(d),
        }
        for layer in range(cfg.layers):
            for name in ("q", "k", "v", "o"):
                p[f"l{layer}_w{name}"] = dense(d, d)
                p[f"l{layer}_b{name}"] = np.zeros(d)
            p[f"l{layer}_ln1_g"] = np.ones(d)
            p[f"l{layer}_ln1_b"] = np.zeros(d)
            p[f"l{layer}_w1"] = dense(d, f)
            p[f"l{layer}_b1"] = np.zeros(f)
            p[f"l{layer}_w2"] = dense(f, d)
            p[f"l{layer}_b2"] = np.zeros(d)
            p[f"l{layer}_ln2_g"] = np.ones(d)
            p[f"l{layer}_ln2_b"] = np.zeros(d)
        p["pool_w"] = dense(d, d)
        p["pool_b"] = np.zeros(d)
        if cfg.zero_init_output:
            p["out_w"] = np.zeros((d, cfg.num_classes))
        else:
            p["out_w"] = dense(d, cfg.num_classes)
        p["out_b"] = np.zeros(cfg.num_classes)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    def _input_ids(self, seq: TokenSequence) -> list:
        self._check_ids(seq)
        if len(seq) + 1 > self.config.max_len:
            raise LengthError(f"sequence of {len(seq)} tokens plus [CLS] exceeds max_len {self.config.max_len}")
        return [self.config.cls_id, *seq.ids]

    def encode(self, seqs: Sequence[TokenSequence]) -> Batch:
        rows = [[self._input_ids(s)] for s in seqs]
        return pack_segments(rows, self.pad_id, [s.label for s in seqs])

    def input_tokens(self, seq: TokenSequence) -> list:
        return [CLS, *seq.tokens]

    def special_positions(self, seq: TokenSequence) -> tuple:
        if seq.pair_boundary is None:
            return (0,)
        return (0, seq.pair_boundary)

    def forward_embedded(self, emb: Tensor, batch: Batch, capture: bool = False):
        cfg = self.config
        p = self.params
        B, n = batch.ids.shape
        H, d = cfg.heads, cfg.model_dim
        dh = d // H
        mask = batch.mask()
        key_mask = mask[:, None, None, :]
        uniform = None
        if self.attention_activation == "uniform":
            uniform = np.broadcast_to(key_mask / key_mask.sum(axis=-1, keepdims=True), (B, 1, n, n))

        x = layer_norm(emb + p["position"][:n], p["emb_ln_g"], p["emb_ln_b"])
        attentions = []
        scale = 1.0 / math.sqrt(dh)
        for layer in range(cfg.layers):
            pre = f"l{layer}_"

            def heads(t):
                return t.reshape(B, n, H, dh).transpose(0, 2, 1, 3)

            q = heads(x @ p[pre + "wq"] + p[pre + "bq"])
            k = heads(x @ p[pre + "wk"] + p[pre + "bk"])
            v = heads(x @ p[pre + "wv"] + p[pre + "bv"])
            if uniform is None:
                attn = softmax((q @ k.transpose(0, 1, 3, 2)) * scale, axis=-1, mask=key_mask)
            else:
                attn = Tensor(uniform)
            if capture:
                attentions.append(np.broadcast_to(attn.data, (B, H, n, n)))
            ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
            x = layer_norm(x + (ctx @ p[pre + "wo"] + p[pre + "bo"]), p[pre + "ln1_g"], p[pre + "ln1_b"])
            ff = gelu(x @ p[pre + "w1"] + p[pre + "b1"]) @ p[pre + "w2"] + p[pre + "b2"]
            x = layer_norm(x + ff, p[pre + "ln2_g"], p[pre + "ln2_b"])
        pooled = tanh(x[:, 0, :] @ p["pool_w"] + p["pool_b"])
        logits = pooled @ p["out_w"] + p["out_b"]
        return logits, attentions

    def forward(self, seq: TokenSequence):
        batch = self.encode([seq])
        logits, attentions = self.forward_batch(batch, capture=True)
        record = AttentionRecord(
            kind="transformer",
            tokens=self.input_tokens(seq),
            layers=[np.array(a[0]) for a in attentions],
            special_positions=self.special_positions(seq),
        )
        return logits.data[0], record


def forward_transformer(model: TransformerClassifier, seq: TokenSequence):
    """Logits and per-layer, per-head attention for one instance."""
    return model.forward(seq)
