import itertools
import json
from pathlib import Path

import numpy as np
import pytest

from munmt import tensor as T
from munmt.data import BOS, EOS, PAD, Batch, NoiseConfig, check_framing
from munmt.decoding import (DecodeConfig, IncrementalDecoder, _encode_np, generate_pseudo_pairs, translate,
                            translate_lines, zero_shot_translate)
from munmt.model import TransformerConfig, decode_teacher_forced, encode, init_unmt
from munmt.objectives import denoising_loss
from munmt.optim import Adam

GOLDEN = json.loads((Path(__file__).parent / "golden" / "decoding.json").read_text())
V = 40


def model(seed=0, **kw):
    cfg = TransformerConfig.desk(vocab_size=kw.pop("vocab", V), n_languages=3, **kw)
    return init_unmt(cfg, np.random.default_rng(seed))


def sents(rng, n, lo=2, hi=8):
    return [[BOS] + rng.integers(5, V, int(rng.integers(lo, hi))).tolist() + [EOS] for _ in range(n)]


def test_config_validation_and_cap():
    with pytest.raises(ValueError):
        DecodeConfig(strategy="sample")
    with pytest.raises(ValueError):
        DecodeConfig(beam_size=0)
    cfg = DecodeConfig()
    assert cfg.cap(10, 64) == 20
    assert cfg.cap(50, 64) == 64


def test_incremental_decoder_matches_teacher_forcing():
    rng = np.random.default_rng(0)
    p = model(0)
    src = Batch.from_sequences(sents(rng, 3), 0)
    tgt = np.array([[BOS] + rng.integers(5, V, 5).tolist() for _ in range(3)])
    with T.no_grad():
        ref = decode_teacher_forced(encode(src, p), src.pad_mask, tgt, 2, p).data
    dec = IncrementalDecoder(p, _encode_np(p, src), src.pad_mask, np.full(3, 2))
    for t in range(tgt.shape[1]):
        logp = dec.step(tgt[:, t])
        z = ref[:, t] - ref[:, t].max(axis=-1, keepdims=True)
        want = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        np.testing.assert_allclose(logp, want, atol=1e-4)


def test_outputs_are_framed_and_capped():
    rng = np.random.default_rng(1)
    p = model(1, max_len=16)
    src = sents(rng, 6, 2, 14)
    for cfg in (DecodeConfig(), DecodeConfig(strategy="beam", beam_size=3)):
        out = translate(src, 0, 1, p, cfg)
        assert check_framing(Batch.from_sequences(out, 1))
        for s, o in zip(src, out):
            assert len(o) <= cfg.cap(len(s), 16)
            assert PAD not in o and BOS not in o[1:]


def test_beam_one_equals_greedy():
    rng = np.random.default_rng(2)
    p = model(2)
    src = sents(rng, 5)
    assert translate(src, 0, 1, p, DecodeConfig(strategy="beam", beam_size=1)) == translate(src, 0, 1, p)


def test_decoding_is_deterministic_and_batch_independent():
    rng = np.random.default_rng(3)
    p = model(3)
    src = sents(rng, 7)
    a = translate(src, 0, 2, p)
    assert a == translate(src, 0, 2, p)
    assert [translate([s], 0, 2, p)[0] for s in src] == a
    assert translate_lines(p, src, 0, 2, chunk=3) == a


def test_greedy_self_consistency():
    rng = np.random.default_rng(4)
    p = model(4)
    src = Batch.from_sequences(sents(rng, 1), 0)
    out = translate(src, 0, 1, p)[0]
    with T.no_grad():
        for t in range(1, len(out) - 1):
            logits = decode_teacher_forced(encode(src, p), src.pad_mask, np.array([out[:t]]), 1, p).data
            lp = logits[0, -1].copy()
            lp[[PAD, BOS]] = -np.inf
            assert int(lp.argmax()) == out[t]


def _exhaustive_best(p, src, tgt_lang, cap, lp):
    """Best length-normalised hypothesis among every sequence up to ``cap`` tokens."""
    batch = Batch.from_sequences([src], 0)
    enc = _encode_np(p, batch)
    best, best_seq = -np.inf, None
    words = [t for t in range(V) if t not in (PAD, BOS, EOS)]
    for n in range(0, cap - 1):
        for body in itertools.product(words, repeat=n):
            seq = [BOS, *body, EOS]
            dec = IncrementalDecoder(p, enc, batch.pad_mask, np.array([tgt_lang]))
            score = 0.0
            for prev, nxt in zip(seq[:-1], seq[1:]):
                score += dec.step(np.array([prev]))[0, nxt]
            norm = score / len(seq) ** lp
            if norm > best:
                best, best_seq = norm, seq
    return best_seq


def test_wide_beam_finds_exhaustive_optimum():
    global V
    old, V = V, 9
    try:
        p = model(5, vocab=9, max_len=4)
        src = [BOS, 6, EOS]
        cfg = DecodeConfig(strategy="beam", beam_size=9 ** 3, length_penalty=1.0)
        assert translate([src], 0, 1, p, cfg)[0] == _exhaustive_best(p, src, 1, 4, 1.0)
    finally:
        V = old


def test_pseudo_pairs_keep_originals():
    rng = np.random.default_rng(6)
    p = model(6)
    batch = Batch.from_sequences(sents(rng, 5), 1)
    pairs = generate_pseudo_pairs(batch, 0, p)
    assert len(pairs) == 5
    assert [q.target for q in pairs] == batch.sequences()
    assert all(q.source_lang == 0 and q.target_lang == 1 for q in pairs)


def test_target_language_drives_every_step():
    rng = np.random.default_rng(7)
    p = model(7)
    src = sents(rng, 4)
    a = translate(src, 1, 2, p)
    p["lang_emb"].data[0] = p["lang_emb"].data[2]
    assert translate(src, 1, 0, p) == a


def test_zero_shot_contract():
    rng = np.random.default_rng(8)
    p = model(8)
    src = sents(rng, 3)
    assert zero_shot_translate(src, 1, 2, p) == translate(src, 1, 2, p)
    with pytest.raises(ValueError):
        zero_shot_translate(src, 0, 2, p)
    with pytest.raises(ValueError):
        zero_shot_translate(src, 2, 2, p)


def test_overfit_copy_model_reproduces_input():
    rng = np.random.default_rng(9)
    p = model(9)
    data = sents(rng, 4, 3, 6)
    batch = Batch.from_sequences(data, 1)
    opt = Adam(p.tensors, lr=3e-3)
    quiet = NoiseConfig(p_drop=0.0, k_swap=0)
    for _ in range(300):
        T.backward(denoising_loss(batch, quiet, p, rng))
        opt.step()
    assert translate(data, 1, 1, p) == data


def test_golden_generations():
    rng = np.random.default_rng(10)
    p = model(10)
    src = sents(rng, 4)
    assert translate(src, 0, 1, p) == GOLDEN["greedy"]
    assert translate(src, 0, 1, p, DecodeConfig(strategy="beam", beam_size=3)) == GOLDEN["beam3"]
