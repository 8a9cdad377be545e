# src/backend/tokenizer.py
"""Character-level toy tokenizer.

Content ids are ``0..vocab_size-1`` (one character each); the reserved ids
blank / sos / eos / pad sit directly above the content range.
"""
from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Dict, List, Sequence

from .errors import ConfigError, TokenizationError

ALPHABET = string.ascii_lowercase + string.digits


@dataclass(frozen=True)
class Tokenizer:
    vocab_size: int

    def __post_init__(self) -> None:
        if not 2 <= self.vocab_size <= len(ALPHABET):
            raise ConfigError(
                f"vocab_size must be in [2, {len(ALPHABET)}], got {self.vocab_size}"
            )

    @property
    def alphabet(self) -> str:
        return ALPHABET[: self.vocab_size]

    @property
    def blank_id(self) -> int:
        return self.vocab_size

    @property
    def sos_id(self) -> int:
        return self.vocab_size + 1

    @property
    def eos_id(self) -> int:
        return self.vocab_size + 2

    @property
    def pad_id(self) -> int:
        return self.vocab_size + 3

    @property
    def vocab_total(self) -> int:
        return self.vocab_size + 4

    @property
    def _index(self) -> Dict[str, int]:
        return {ch: i for i, ch in enumerate(self.alphabet)}

    def tokenize(self, text: str) -> List[int]:
        index = self._index
        ids: List[int] = []
        for pos, ch in enumerate(text):
            if ch not in index:
                raise TokenizationError(f"Unknown character {ch!r} at position {pos}")
            ids.append(index[ch])
        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < self.vocab_size:
                raise TokenizationError(f"Id {i} is not a content token")
            out.append(self.alphabet[i])
        return "".join(out)

    def is_content(self, token_id: int) -> bool:
        return 0 <= int(token_id) < self.vocab_size
