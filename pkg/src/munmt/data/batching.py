"""Padded batches under a token budget."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bpe import BOS, EOS, PAD


@dataclass
class Batch:
    tokens: np.ndarray  # [B, L] int64, PAD padded
    lengths: np.ndarray  # [B]
    langs: np.ndarray  # [B] language ids

    @property
    def n_tokens(self) -> int:
        return int(self.lengths.sum())

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def pad_mask(self) -> np.ndarray:
        """True at real positions, from the lengths rather than the token ids."""
        return np.arange(self.tokens.shape[1])[None, :] < self.lengths[:, None]

    def sequences(self) -> list[list[int]]:
        return [self.tokens[i, : self.lengths[i]].tolist() for i in range(self.size)]

    @classmethod
    def from_sequences(cls, seqs: Sequence[Sequence[int]], langs) -> "Batch":
        if len(seqs) == 0:
            raise ValueError("empty batch")
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        tokens = np.full((len(seqs), int(lengths.max())), PAD, dtype=np.int64)
        for i, s in enumerate(seqs):
            tokens[i, : len(s)] = s
        langs = np.broadcast_to(np.asarray(langs, dtype=np.int64), (len(seqs),)).copy()
        return cls(tokens, lengths, langs)

    def select(self, rows) -> "Batch":
        rows = np.asarray(rows)
        lengths = self.lengths[rows]
        L = int(lengths.max())
        return Batch(self.tokens[rows, :L], lengths, self.langs[rows])


def _truncate(seq: Sequence[int], budget: int) -> list[int]:
    seq = list(seq[: budget - 1])
    seq.append(EOS)
    return seq


def make_batches(
    ids: Sequence[Sequence[int]],
    langs,
    token_budget: int = 2000,
    counters: Counter | None = None,
) -> list[Batch]:
    """Greedy length-sorted packing.

    No batch holds more than ``token_budget`` non-pad tokens and every sentence
    lands in exactly one batch.  Sentences longer than the budget are cut to
    ``token_budget`` tokens (EOS kept) and counted under ``"truncated"``.
    """
    if token_budget < 2:
        raise ValueError("token_budget must allow at least BOS and EOS")
    n = len(ids)
    langs = np.broadcast_to(np.asarray(langs, dtype=np.int64), (n,))
    seqs = []
    for s in ids:
        if len(s) > token_budget:
            s = _truncate(s, token_budget)
            if counters is not None:
                counters["truncated"] += 1
        seqs.append(s)
    order = sorted(range(n), key=lambda i: (len(seqs[i]), i))
    batches: list[Batch] = []
    cur: list[int] = []
    used = 0
    for i in order:
        ln = len(seqs[i])
        if cur and used + ln > token_budget:
            batches.append(Batch.from_sequences([seqs[j] for j in cur], langs[cur]))
            cur, used = [], 0
        cur.append(i)
        used += ln
    if cur:
        batches.append(Batch.from_sequences([seqs[j] for j in cur], langs[cur]))
    return batches


def check_framing(batch: Batch) -> bool:
    """Every row starts with BOS and holds exactly one EOS before padding."""
    for i in range(batch.size):
        row = batch.tokens[i, : batch.lengths[i]]
        if row[0] != BOS or row[-1] != EOS or int((row == EOS).sum()) != 1:
            return False
        if (batch.tokens[i, batch.lengths[i]:] != PAD).any():
            return False
    return True
