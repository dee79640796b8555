"""Types shared by the classifier architectures."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import ContractError, LengthError
from ..tensor import Tensor, gather, softmax

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP)


@dataclass(frozen=True)
class TokenSequence:
    """A tokenized instance.

    Pair instances store ``first + [SEP] + second`` with ``pair_boundary``
    pointing at the first token of ``second``.
    """

    tokens: tuple
    ids: tuple
    label: int = 0
    pair_boundary: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if len(self.tokens) != len(self.ids):
            raise ContractError(f"{len(self.tokens)} tokens but {len(self.ids)} ids")
        if not self.ids:
            raise LengthError("empty token sequence")
        if self.pair_boundary is not None and not 0 < self.pair_boundary < len(self.ids):
            raise ContractError(f"pair_boundary {self.pair_boundary} outside (0, {len(self.ids)})")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def is_pair(self) -> bool:
        return self.pair_boundary is not None

    def segments(self) -> list[tuple[int, int]]:
        """Index ranges of the content segments, excluding the separator."""
        if self.pair_boundary is None:
            return [(0, len(self.ids))]
        return [(0, self.pair_boundary - 1), (self.pair_boundary, len(self.ids))]


@dataclass
class Batch:
    """Padded id matrix with per-segment lengths.

    ``segments`` are column ranges shared by every row; ``lengths[b, s]`` is
    the number of real tokens of row ``b`` at the start of segment ``s``.
    """

    ids: np.ndarray
    segments: tuple
    lengths: np.ndarray
    labels: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    def mask(self) -> np.ndarray:
        m = np.zeros(self.ids.shape, dtype=bool)
        for s, (lo, hi) in enumerate(self.segments):
            m[:, lo:hi] = np.arange(hi - lo)[None, :] < self.lengths[:, s:s + 1]
        return m

    def with_ids(self, ids: np.ndarray) -> "Batch":
        ids = np.asarray(ids, dtype=np.int64)
        reps = ids.shape[0] // self.size
        return Batch(ids, self.segments, np.repeat(self.lengths, reps, axis=0), None)

    def repeat(self, k: int) -> "Batch":
        return Batch(np.repeat(self.ids, k, axis=0), self.segments,
                     np.repeat(self.lengths, k, axis=0), None)


def pack_segments(rows: Sequence[Sequence[Sequence[int]]], pad_id: int, labels=None) -> Batch:
    """Build a Batch from per-row lists of segments (each a list of ids)."""
    n_seg = len(rows[0])
    widths = [max(len(r[s]) for r in rows) for s in range(n_seg)]
    bounds, start = [], 0
    for w in widths:
        bounds.append((start, start + w))
        start += w
    ids = np.full((len(rows), start), pad_id, dtype=np.int64)
    lengths = np.zeros((len(rows), n_seg), dtype=np.int64)
    for b, r in enumerate(rows):
        for s, (lo, _) in enumerate(bounds):
            ids[b, lo:lo + len(r[s])] = r[s]
            lengths[b, s] = len(r[s])
    lab = None if labels is None else np.asarray(labels, dtype=np.int64)
    return Batch(ids, tuple(bounds), lengths, lab)


@dataclass
class AttentionRecord:
    """Attention captured during one forward pass of one instance.

    Transformer records hold ``layers``: one ``(heads, n, n)`` array per layer.
    BiLSTM records hold ``weights``: one vector per encoded sequence, along with
    the hidden states ``hidden`` the weights were computed from.
    """

    kind: str
    tokens: list
    layers: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    hidden: list = field(default_factory=list)
    special_positions: tuple = ()


class Classifier:
    """Common interface used by training and by every explanation method.

    Subclasses define ``encode``, ``input_tokens``, ``special_positions`` and
    ``forward_embedded``.  Attribution methods work on the output of
    :meth:`embed` (token embeddings, one vector per input position).
    """

    kind = "base"
    default_lr = 1e-3

    def __init__(self, config, seed: int = 0):
        self.config = config
        self.seed = seed
        self.attention_activation = "softmax"
        self.vocab = None
        self.params: dict[str, Tensor] = {}
        self.reset_parameters(seed)

    # -- to override
    def reset_parameters(self, seed: int) -> None:
        raise NotImplementedError

    def encode(self, seqs: Sequence[TokenSequence]) -> Batch:
        raise NotImplementedError

    def input_tokens(self, seq: TokenSequence) -> list:
        raise NotImplementedError

    def special_positions(self, seq: TokenSequence) -> tuple:
        return ()

    def forward_embedded(self, emb: Tensor, batch: Batch, capture: bool = False):
        """Return ``(logits, captured)`` for pre-computed token embeddings."""
        raise NotImplementedError

    # -- shared
    @property
    def pad_id(self) -> int:
        return self.config.pad_id

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def embedding_table(self) -> Tensor:
        return self.params["embedding"]

    def embed(self, ids: np.ndarray) -> np.ndarray:
        return self.embedding_table.data[np.asarray(ids)]

    def forward_batch(self, batch: Batch, capture: bool = False):
        emb = gather(self.embedding_table, batch.ids)
        return self.forward_embedded(emb, batch, capture)

    def logits(self, batch: Batch) -> np.ndarray:
        return self.forward_batch(batch)[0].data

    def predict_proba(self, batch: Batch) -> np.ndarray:
        return softmax(Tensor(self.logits(batch)), axis=-1).data

    def predict(self, seqs: Sequence[TokenSequence], batch_size: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(seqs), batch_size):
            out.append(self.logits(self.encode(seqs[i:i + batch_size])).argmax(axis=-1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def forward(self, seq: TokenSequence):
        """Logits and AttentionRecord for a single instance."""
        raise NotImplementedError

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    def copy(self) -> "Classifier":
        other = copy.copy(self)
        other.params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return other

    def _check_ids(self, seq: TokenSequence) -> None:
        if not seq.ids:
            raise LengthError("empty token sequence")
