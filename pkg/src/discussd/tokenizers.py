"""Tokenizer interface plus a deterministic word/punctuation tokenizer for tests.

Real subword tokenizers plug in behind the same protocol; the only hard
requirements are character offsets on every token and that the silent
marker ">" maps to exactly one token.
"""

from __future__ import annotations

import re
from typing import NamedTuple, Protocol, Sequence, runtime_checkable

SILENT_TOKEN = ">"


class Token(NamedTuple):
    text: str
    start: int
    end: int


@runtime_checkable
class Tokenizer(Protocol):
    silent_token: str

    def tokenize(self, text: str) -> list[Token]: ...

    def detokenize(self, tokens: Sequence[Token] | Sequence[str]) -> str: ...


class WordPunctTokenizer:
    """Splits into word runs and single punctuation characters.

    Stable under its own detokenization: the token texts of
    ``tokenize(detokenize(ts))`` equal those of ``ts`` for any sequence this
    tokenizer produced, and ">" is always a single token.
    """

    silent_token = SILENT_TOKEN
    _pattern = re.compile(r"\w+|[^\w\s]", re.UNICODE)

    def tokenize(self, text: str) -> list[Token]:
        return [Token(m.group(0), m.start(), m.end()) for m in self._pattern.finditer(text)]

    def detokenize(self, tokens: Sequence[Token] | Sequence[str]) -> str:
        texts = [t.text if isinstance(t, Token) else t for t in tokens]
        return " ".join(texts)


def check_silent_token(tok: Tokenizer) -> None:
    """Assert the tokenizer's silent marker really is a single token."""
    pieces = tok.tokenize(tok.silent_token)
    if len(pieces) != 1 or pieces[0].text != tok.silent_token:
        raise ValueError(
            f"silent token {tok.silent_token!r} must tokenize to exactly one token, got {pieces!r}"
        )
