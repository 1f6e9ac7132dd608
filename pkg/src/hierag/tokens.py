"""Whitespace tokenizer used for token budgets and chunking."""

from __future__ import annotations

import re

_TOKEN = re.compile(r"\S+")


def whitespace_tokens(text: str) -> list[str]:
    return text.split()


def detokenize(tokens) -> str:
    return " ".join(tokens)


def count_tokens(text: str) -> int:
    return len(text.split())


def truncate_to_tokens(text: str, limit: int) -> str:
    """Cut ``text`` after its first ``limit`` whitespace tokens.

    Original spacing and line breaks inside the kept prefix are preserved.
    """
    if limit <= 0:
        return ""
    end = None
    for i, m in enumerate(_TOKEN.finditer(text)):
        if i == limit - 1:
            end = m.end()
            break
    return text if end is None else text[:end]
