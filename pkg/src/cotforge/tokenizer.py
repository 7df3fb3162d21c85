"""Pluggable token counting.

Token totals are tokenizer-relative; everything that counts or truncates
tokens (usage accounting, reasoning-length control, dataset statistics) goes
through this interface so a model-specific tokenizer can be plugged in.
"""

from __future__ import annotations

import re
from typing import Protocol


class Tokenizer(Protocol):
    name: str

    def count(self, text: str) -> int: ...

    def truncate(self, text: str, max_tokens: int) -> str: ...


class WhitespaceTokenizer:
    """Counts whitespace-delimited runs; truncation preserves original text."""

    name = "whitespace"

    _TOKEN_RX = re.compile(r"\S+")

    def count(self, text: str) -> int:
        return sum(1 for _ in self._TOKEN_RX.finditer(text))

    def truncate(self, text: str, max_tokens: int) -> str:
        """Return the prefix of ``text`` holding at most ``max_tokens`` tokens."""
        if max_tokens <= 0:
            return ""
        for i, match in enumerate(self._TOKEN_RX.finditer(text)):
            if i == max_tokens - 1:
                return text[: match.end()]
        return text


_REGISTRY = {
    WhitespaceTokenizer.name: WhitespaceTokenizer,
}


def get_tokenizer(name: str) -> Tokenizer:
    try:
        return _REGISTRY[name]()
    except KeyError:
        raise ValueError(f"unknown tokenizer: {name!r} (available: {sorted(_REGISTRY)})") from None
