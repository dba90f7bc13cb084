"""Closed-vocabulary word-level tokenizer with atomic protocol tokens."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import IdOutOfRange
from .templates import DEFAULT_CLASSES, LEXICON_TEXTS

BOS, EOS, PAD, UNK, IMG, P_OPEN_ID, P_CLOSE_ID, SEG_ID = range(8)

_SPECIAL_SURFACE = {
    BOS: "<bos>",
    EOS: "<eos>",
    PAD: "<pad>",
    UNK: "<unk>",
    IMG: "<img>",
    P_OPEN_ID: "<p>",
    P_CLOSE_ID: "</p>",
    SEG_ID: "[SEG]",
}
_SURFACE_TO_SPECIAL = {v: k for k, v in _SPECIAL_SURFACE.items()}

# Protocol markers and control surfaces are atomic; words keep interior
# hyphens/apostrophes; any other non-space character stands alone.
_TOKEN_RE = re.compile(
    r"\[SEG\]|</p>|<p>|<bos>|<eos>|<pad>|<unk>|<img>"
    r"|[A-Za-z0-9][A-Za-z0-9\-']*"
    r"|[^\sA-Za-z0-9]"
)


@dataclass
class Vocab:
    token_to_id: dict[str, int]
    id_to_token: list[str] = field(init=False)

    def __post_init__(self):
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise ValueError("token ids must be dense 0..size-1")
        self.id_to_token = [""] * len(ids)
        for tok, i in self.token_to_id.items():
            self.id_to_token[i] = tok

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        """Lowercased word ids; protocol markers map to single ids; OOV -> UNK.

        No BOS/EOS are added.
        """
        ids = []
        for tok in _TOKEN_RE.findall(text):
            if tok in _SURFACE_TO_SPECIAL:
                ids.append(_SURFACE_TO_SPECIAL[tok])
            else:
                ids.append(self.token_to_id.get(tok.lower(), UNK))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        toks = []
        for i in ids:
            if not 0 <= i < self.size:
                raise IdOutOfRange(f"token id {i} outside vocabulary of size {self.size}")
            toks.append(self.id_to_token[i])
        return " ".join(toks)

    def to_json(self) -> str:
        return json.dumps(self.token_to_id, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls(json.loads(text))

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: Path) -> "Vocab":
        return cls.from_json(Path(path).read_text())


def build_vocab(extra_texts: Iterable[str] = (),
                classes: Iterable[str] = DEFAULT_CLASSES) -> Vocab:
    """Deterministic vocabulary: fixed specials, then sorted lexicon words."""
    words: set[str] = set()
    for text in (*LEXICON_TEXTS, *extra_texts, *classes):
        for tok in _TOKEN_RE.findall(text):
            if tok not in _SURFACE_TO_SPECIAL:
                words.add(tok.lower())
    token_to_id = {surface: i for i, surface in _SPECIAL_SURFACE.items()}
    for offset, word in enumerate(sorted(words)):
        token_to_id[word] = 8 + offset
    return Vocab(token_to_id)
