"""Training losses: MLM, denoising, back-translation and the two KD terms.

Every loss is a per-token mean over non-pad target positions.  The KD terms
compare temperature-softened output distributions over the same
teacher-forced target; the first argument of the KL (the student side)
carries the gradient and the second is held fixed.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data.batching import Batch
from .data.bpe import PAD
from .data.noise import NoiseConfig, add_noise, mask_for_mlm
from .model import ModelParams, decode_teacher_forced, encode, mlm_forward
from .tensor import Tensor

KD_MODES = ("none", "skd", "lbkd")


@dataclass
class KdConfig:
    alpha: float = 0.1
    temperature: float = 2.0
    mode: str = "none"

    def __post_init__(self):
        if not 0 <= self.alpha < 1:
            raise ValueError(f"alpha must be in [0, 1), got {self.alpha}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.mode not in KD_MODES:
            raise ValueError(f"unknown KD mode {self.mode!r}; expected one of {KD_MODES}")

    @property
    def kd_weight(self) -> float:
        return self.alpha * self.temperature * self.temperature


@dataclass
class PseudoPair:
    """A model-generated source paired with a genuine monolingual target."""

    source: list[int]
    target: list[int]
    source_lang: int
    target_lang: int


def _single_language(batch: Batch) -> int:
    if batch.size == 0:
        raise ValueError("empty batch")
    langs = np.unique(batch.langs)
    if langs.size != 1:
        raise ValueError(f"batch mixes languages {langs.tolist()}")
    return int(langs[0])


def teacher_forced_logits(sources: Sequence[Sequence[int]], source_lang, targets: Sequence[Sequence[int]],
                          target_lang, params: ModelParams) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Logits predicting ``targets[:, 1:]`` from ``targets[:, :-1]`` given ``sources``.

    Returns ``(logits [B, Lt-1, V], labels [B, Lt-1], mask [B, Lt-1])``.
    """
    src = Batch.from_sequences(sources, source_lang)
    tgt = Batch.from_sequences(targets, target_lang)
    enc = encode(src, params)
    logits = decode_teacher_forced(enc, src.pad_mask, tgt.tokens[:, :-1], tgt.langs, params)
    labels = tgt.tokens[:, 1:]
    return logits, labels, labels != PAD


def mlm_loss(batch: Batch, params: ModelParams, rng: np.random.Generator, mask_rate: float = 0.15) -> Tensor:
    """Masked-LM cross-entropy over the selected positions (0 when none are selected)."""
    masked, pos = mask_for_mlm(batch.tokens, mask_rate, rng, params.config.vocab_size)
    if pos.size == 0:
        return T.tensor(0.0)
    logits = mlm_forward(masked, batch.langs, pos, params)
    return T.cross_entropy(logits, batch.tokens.reshape(-1)[pos])


def denoising_loss(batch: Batch, cfg: NoiseConfig, params: ModelParams, rng: np.random.Generator) -> Tensor:
    """Reconstruct each sentence from its corrupted copy, in its own language."""
    lang = _single_language(batch)
    clean = batch.sequences()
    noisy = [add_noise(s, cfg, rng) for s in clean]
    logits, labels, mask = teacher_forced_logits(noisy, lang, clean, lang, params)
    return T.cross_entropy(logits, labels, mask)


def usable_pairs(pairs: Sequence[PseudoPair], counters: Counter | None = None) -> list[PseudoPair]:
    """Drop pairs whose generated source has no tokens between BOS and EOS."""
    keep = []
    for p in pairs:
        if len(p.source) <= 2:
            if counters is not None:
                counters["empty_source"] += 1
            continue
        keep.append(p)
    return keep


def _pair_forward(pairs: Sequence[PseudoPair], params: ModelParams):
    return teacher_forced_logits([p.source for p in pairs], [p.source_lang for p in pairs],
                                 [p.target for p in pairs], [p.target_lang for p in pairs], params)


def backtranslation_loss(pairs: Sequence[PseudoPair], params: ModelParams, counters: Counter | None = None) -> Tensor:
    pairs = usable_pairs(pairs, counters)
    if not pairs:
        return T.tensor(0.0)
    logits, labels, mask = _pair_forward(pairs, params)
    return T.cross_entropy(logits, labels, mask)


def combine_kd(l_mb, l_kd, cfg: KdConfig):
    """``(1 - alpha) * l_mb + alpha * T^2 * l_kd``; works on floats and tensors."""
    return (1 - cfg.alpha) * l_mb + cfg.kd_weight * l_kd


def _soft(logits: Tensor, temperature: float) -> Tensor:
    return T.softmax_with_temperature(logits, temperature)


def _fixed_soft(logits: np.ndarray, temperature: float) -> Tensor:
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return T.tensor(e / e.sum(axis=-1, keepdims=True))


def kd_from_logits(student_logits: Tensor, target_logits: np.ndarray, mask: np.ndarray, temperature: float) -> Tensor:
    """``KL(student || target)`` per token, target held fixed."""
    return T.kl_divergence(_soft(student_logits, temperature), _fixed_soft(target_logits, temperature), mask)


def _check_z(pairs: Sequence[PseudoPair], z_lang: int) -> None:
    for p in pairs:
        if z_lang in (p.source_lang, p.target_lang):
            raise ValueError(f"SKD pivot language {z_lang} must differ from the pair languages "
                             f"({p.source_lang}, {p.target_lang})")


def _z_logits(pairs: Sequence[PseudoPair], z_sources, z_lang: int, params: ModelParams) -> np.ndarray:
    with T.no_grad():
        logits, _, _ = teacher_forced_logits(z_sources, z_lang, [p.target for p in pairs],
                                             [p.target_lang for p in pairs], params)
    return logits.data


def skd_loss(pairs: Sequence[PseudoPair], z_sources: Sequence[Sequence[int]], z_lang: int, params: ModelParams,
             temperature: float = 2.0) -> Tensor:
    """Self-distillation between two routes to the same target.

    ``pairs`` carry the j-route source (gradient side); ``z_sources`` are the
    same targets rendered in language ``z_lang`` by the frozen current model.
    """
    _check_z(pairs, z_lang)
    if len(z_sources) != len(pairs):
        raise ValueError("one z-route source is needed per pair")
    logits, _, mask = _pair_forward(pairs, params)
    return kd_from_logits(logits, _z_logits(pairs, z_sources, z_lang, params), mask, temperature)


def check_teacher(teacher: ModelParams, student: ModelParams) -> None:
    if teacher.config.vocab_size != student.config.vocab_size:
        raise ValueError(f"teacher vocabulary ({teacher.config.vocab_size}) differs from student "
                         f"vocabulary ({student.config.vocab_size})")
    if not teacher.has_decoder:
        raise ValueError("teacher has no decoder")


def _teacher_logits(pairs: Sequence[PseudoPair], teacher: ModelParams) -> np.ndarray:
    with T.no_grad():
        logits, _, _ = _pair_forward(pairs, teacher)
    return logits.data


def lbkd_loss(pairs: Sequence[PseudoPair], teacher: ModelParams, student: ModelParams,
              temperature: float = 2.0) -> Tensor:
    """Distil a frozen branch teacher into the student on the same pseudo pairs."""
    check_teacher(teacher, student)
    logits, _, mask = _pair_forward(pairs, student)
    return kd_from_logits(logits, _teacher_logits(pairs, teacher), mask, temperature)


def bt_kd_losses(pairs: Sequence[PseudoPair], params: ModelParams, kd: KdConfig, *, z_sources=None,
                 z_lang: int | None = None, teacher: ModelParams | None = None,
                 counters: Counter | None = None) -> tuple[Tensor, Tensor | None]:
    """Back-translation loss and, if enabled, the KD loss from one shared forward pass.

    Pairs with an empty generated source are dropped from both terms.
    """
    keep = [i for i, p in enumerate(pairs) if len(p.source) > 2]
    if counters is not None:
        counters["empty_source"] += len(pairs) - len(keep)
    if not keep:
        return T.tensor(0.0), (None if kd.mode == "none" else T.tensor(0.0))
    pairs = [pairs[i] for i in keep]
    logits, labels, mask = _pair_forward(pairs, params)
    l_mb = T.cross_entropy(logits, labels, mask)
    if kd.mode == "none":
        return l_mb, None
    if kd.mode == "skd":
        if z_sources is None or z_lang is None:
            raise ValueError("SKD needs z-route sources and their language")
        _check_z(pairs, z_lang)
        target = _z_logits(pairs, [z_sources[i] for i in keep], z_lang, params)
    else:
        if teacher is None:
            raise ValueError("LBKD needs a teacher")
        check_teacher(teacher, params)
        target = _teacher_logits(pairs, teacher)
    return l_mb, kd_from_logits(logits, target, mask, kd.temperature)
