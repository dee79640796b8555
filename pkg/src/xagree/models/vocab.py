"""Token <-> id mapping with reserved special ids."""

from __future__ import annotations

from typing import Iterable

from .base import CLS, PAD, SEP, SPECIAL_TOKENS, UNK


class Vocabulary:
    """Ids 0-3 are reserved for [PAD], [UNK], [CLS], [SEP]."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens = list(tokens)
        if tuple(self.tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            self.tokens = list(SPECIAL_TOKENS) + [t for t in self.tokens if t not in SPECIAL_TOKENS]
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def ids(self, tokens: Iterable[str]) -> list:
        return [self.id(t) for t in tokens]

    pad_id = property(lambda self: self.index[PAD])
    unk_id = property(lambda self: self.index[UNK])
    cls_id = property(lambda self: self.index[CLS])
    sep_id = property(lambda self: self.index[SEP])
