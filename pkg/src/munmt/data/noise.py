"""Corruption functions: denoising noise and MLM masking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bpe import BOS, EOS, MASK, N_SPECIAL, PAD


@dataclass
class NoiseConfig:
    p_drop: float = 0.1
    k_swap: int = 3
    seed: int = 0

    def __post_init__(self):
        # p_drop == 1 is allowed: the keep-one rule still leaves a token
        if not 0 <= self.p_drop <= 1:
            raise ValueError(f"p_drop must be in [0, 1], got {self.p_drop}")
        if self.k_swap < 0:
            raise ValueError(f"k_swap must be >= 0, got {self.k_swap}")


def add_noise(ids, cfg: NoiseConfig, rng: np.random.Generator) -> list[int]:
    """Word deletion followed by a bounded local shuffle.

    BOS and EOS stay in place.  Each interior token is dropped with
    probability ``p_drop`` (one survivor is forced if all would go), then the
    survivors are reordered by sorting ``position + U(0, k_swap + 1)``, which
    moves no token more than ``k_swap`` places.
    """
    ids = list(ids)
    interior = np.asarray(ids[1:-1], dtype=np.int64)
    n = interior.size
    if n == 0:
        return ids
    if cfg.p_drop > 0:
        keep = rng.random(n) >= cfg.p_drop
        if not keep.any():
            keep[rng.integers(n)] = True
        interior = interior[keep]
    if cfg.k_swap > 0 and interior.size > 1:
        scores = np.arange(interior.size) + rng.uniform(0, cfg.k_swap + 1, interior.size)
        interior = interior[np.argsort(scores, kind="stable")]
    return [ids[0], *interior.tolist(), ids[-1]]


def mask_for_mlm(ids, mask_rate: float, rng: np.random.Generator, vocab_size: int | None = None,
                 mask_id: int = MASK) -> tuple[np.ndarray, np.ndarray]:
    """BERT-style masking of interior tokens.

    Each non-special position is selected with probability ``mask_rate``;
    selected positions become MASK (80%), a random non-special token (10%)
    or stay as they are (10%).  Returns the corrupted copy and the flat
    indices of the selected positions (the targets are ``ids`` there).
    Works on 1-D sequences and on padded 2-D batches alike.
    """
    if not 0 <= mask_rate < 1:
        raise ValueError(f"mask_rate must be in [0, 1), got {mask_rate}")
    ids = np.asarray(ids, dtype=np.int64)
    out = ids.copy()
    if mask_rate == 0:
        return out, np.zeros(0, dtype=np.int64)
    eligible = (ids != PAD) & (ids != BOS) & (ids != EOS)
    selected = eligible & (rng.random(ids.shape) < mask_rate)
    pos = np.flatnonzero(selected)
    if pos.size == 0:
        return out, pos
    r = rng.random(pos.size)
    flat = out.reshape(-1)
    flat[pos[r < 0.8]] = mask_id
    rand_pos = pos[(r >= 0.8) & (r < 0.9)]
    if rand_pos.size:
        hi = vocab_size if vocab_size is not None else int(ids.max()) + 1
        flat[rand_pos] = rng.integers(N_SPECIAL, max(hi, N_SPECIAL + 1), rand_pos.size)
    return out, pos
