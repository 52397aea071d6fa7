"""Whitespace toy tokenizer for prompt streams.

A word that parses as an integer maps to that id modulo the vocabulary; any
other word maps to its CRC-32 modulo the vocabulary. Decoding prints ids.
"""

from __future__ import annotations

import zlib
from pathlib import Path


def encode(text: str, vocab_size: int) -> list[int]:
    ids = []
    for word in text.split():
        try:
            ids.append(int(word) % vocab_size)
        except ValueError:
            ids.append(zlib.crc32(word.encode("utf-8")) % vocab_size)
    return ids


def decode(ids) -> str:
    return " ".join(str(int(i)) for i in ids)


def read_prompts(path, vocab_size: int) -> list[list[int]]:
    """One token list per non-blank UTF-8 line."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [encode(line, vocab_size) for line in lines if line.strip()]


def fit_length(ids: list[int], length: int) -> list[int]:
    """Cycle or truncate ``ids`` to exactly ``length`` tokens."""
    if not ids:
        raise ValueError("cannot stretch an empty token list")
    reps = -(-length // len(ids))
    return (ids * reps)[:length]
