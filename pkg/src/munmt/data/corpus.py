"""Corpus cleaning and pretokenization."""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Iterator

# word characters stay together; every other non-space character is its own token
_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def pretokenize(text: str) -> list[str]:
    """Split on whitespace and detach punctuation.

    >>> pretokenize("Hello, world!")
    ['Hello', ',', 'world', '!']
    """
    return _TOKEN_RE.findall(text)


def clean_corpus(lines: Iterable[str | bytes], max_words: int = 50, counters: Counter | None = None) -> Iterator[str]:
    """Drop blank lines and lines with more than ``max_words`` whitespace words.

    Byte lines that are not valid UTF-8 are skipped and counted under
    ``"invalid_utf8"`` in ``counters``.  Kept lines pass through unchanged
    apart from the trailing newline.
    """
    for line in lines:
        if isinstance(line, bytes):
            try:
                line = line.decode("utf-8")
            except UnicodeDecodeError:
                if counters is not None:
                    counters["invalid_utf8"] += 1
                continue
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        if len(line.split()) > max_words:
            if counters is not None:
                counters["too_long"] += 1
            continue
        yield line


def read_lines(path) -> list[str]:
    with open(path, "rb") as fh:
        return list(clean_corpus(fh, max_words=10**9))


def write_lines(path, lines: Iterable[str]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")
