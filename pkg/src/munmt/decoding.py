"""Greedy and beam decoding.

Generation runs outside the tape on raw arrays with cached self-attention
keys and values, so each new token costs one position of decoder work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data.batching import Batch
from .data.bpe import BOS, EOS, PAD
from .model import ModelParams, encode_tokens, padding_bias
from .objectives import PseudoPair


@dataclass
class DecodeConfig:
    strategy: str = "greedy"
    beam_size: int = 1
    max_len_factor: float = 1.5
    max_len_margin: int = 5
    length_penalty: float = 1.0

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam"):
            raise ValueError(f"unknown decoding strategy {self.strategy!r}")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")

    def cap(self, src_len: int, max_len: int) -> int:
        """Longest allowed output, BOS and EOS included."""
        return min(int(self.max_len_factor * src_len + self.max_len_margin), max_len)


def _ln(x, p, prefix):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + 1e-5) * p[f"{prefix}.g"] + p[f"{prefix}.b"]


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2.0 / math.pi) * x * (1 + 0.044715 * x * x)))


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


class IncrementalDecoder:
    """Step-by-step decoder state for a batch of encoded sources."""

    def __init__(self, params: ModelParams, enc: np.ndarray, src_mask: np.ndarray, tgt_langs: np.ndarray):
        self.p = params.arrays()
        self.cfg = params.config
        B, Ls, d = enc.shape
        H = self.cfg.n_heads
        self.H, self.dh = H, d // H
        self.src_bias = padding_bias(src_mask)  # [B,1,1,Ls]
        self.lang_vec = self.p["lang_emb"][tgt_langs]  # [B,d]
        self.cross_k, self.cross_v = [], []
        for i in range(self.cfg.dec_layers):
            pre = f"dec.{i}.cross"
            self.cross_k.append(self._heads(enc @ self.p[f"{pre}.wk"] + self.p[f"{pre}.bk"]))
            self.cross_v.append(self._heads(enc @ self.p[f"{pre}.wv"] + self.p[f"{pre}.bv"]))
        self.self_k = [np.zeros((B, H, 0, self.dh), dtype=enc.dtype) for _ in range(self.cfg.dec_layers)]
        self.self_v = [np.zeros((B, H, 0, self.dh), dtype=enc.dtype) for _ in range(self.cfg.dec_layers)]
        self.t = 0
        self.scale = 1.0 / math.sqrt(self.dh)

    def _heads(self, x):
        B, L, _ = x.shape
        return x.reshape(B, L, self.H, self.dh).transpose(0, 2, 1, 3)

    def reorder(self, rows: np.ndarray) -> None:
        self.src_bias = self.src_bias[rows]
        self.lang_vec = self.lang_vec[rows]
        self.cross_k = [k[rows] for k in self.cross_k]
        self.cross_v = [v[rows] for v in self.cross_v]
        self.self_k = [k[rows] for k in self.self_k]
        self.self_v = [v[rows] for v in self.self_v]

    def _attend(self, q, k, v, bias):
        s = (q @ k.transpose(0, 1, 3, 2)) * self.scale
        if bias is not None:
            s = s + bias
        return _softmax(s) @ v

    def step(self, tokens: np.ndarray) -> np.ndarray:
        """Feed one token per row; return next-token log-probabilities ``[B, V]``."""
        p = self.p
        B = tokens.shape[0]
        d = self.cfg.d_model
        x = p["tok_emb"][tokens] + p["pos_emb"][self.t] + self.lang_vec  # [B,d]
        x = x[:, None, :]
        for i in range(self.cfg.dec_layers):
            pre = f"dec.{i}"
            h = _ln(x, p, f"{pre}.ln1")
            q = self._heads(h @ p[f"{pre}.self.wq"] + p[f"{pre}.self.bq"])
            k = self._heads(h @ p[f"{pre}.self.wk"] + p[f"{pre}.self.bk"])
            v = self._heads(h @ p[f"{pre}.self.wv"] + p[f"{pre}.self.bv"])
            self.self_k[i] = np.concatenate([self.self_k[i], k], axis=2)
            self.self_v[i] = np.concatenate([self.self_v[i], v], axis=2)
            a = self._attend(q, self.self_k[i], self.self_v[i], None)
            x = x + a.transpose(0, 2, 1, 3).reshape(B, 1, d) @ p[f"{pre}.self.wo"] + p[f"{pre}.self.bo"]
            h = _ln(x, p, f"{pre}.ln_x")
            q = self._heads(h @ p[f"{pre}.cross.wq"] + p[f"{pre}.cross.bq"])
            a = self._attend(q, self.cross_k[i], self.cross_v[i], self.src_bias)
            x = x + a.transpose(0, 2, 1, 3).reshape(B, 1, d) @ p[f"{pre}.cross.wo"] + p[f"{pre}.cross.bo"]
            h = _ln(x, p, f"{pre}.ln2")
            x = x + _gelu(h @ p[f"{pre}.ffn.w1"] + p[f"{pre}.ffn.b1"]) @ p[f"{pre}.ffn.w2"] + p[f"{pre}.ffn.b2"]
        h = _ln(x[:, 0], p, "dec.ln_f")
        logits = h @ p["tok_emb"].T + p["out_bias"]
        self.t += 1
        z = logits - logits.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _as_batch(src, src_lang) -> Batch:
    if isinstance(src, Batch):
        return src
    return Batch.from_sequences([list(s) for s in src], src_lang)


def _encode_np(params: ModelParams, batch: Batch) -> np.ndarray:
    with T.no_grad():
        return encode_tokens(params, batch.tokens, batch.langs, batch.pad_mask).data


def greedy_decode(params: ModelParams, batch: Batch, tgt_lang, cfg: DecodeConfig) -> list[list[int]]:
    B = batch.size
    enc = _encode_np(params, batch)
    tgt_langs = np.broadcast_to(np.asarray(tgt_lang, dtype=np.int64), (B,)).copy()
    dec = IncrementalDecoder(params, enc, batch.pad_mask, tgt_langs)
    caps = np.array([cfg.cap(int(n), params.config.max_len) for n in batch.lengths])
    out = [[BOS] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    cur = np.full(B, BOS, dtype=np.int64)
    for t in range(int(caps.max()) - 1):
        logp = dec.step(cur)
        nxt = logp.argmax(axis=-1)
        for b in range(B):
            if done[b]:
                continue
            # the last slot before the cap is reserved for EOS
            tok = int(nxt[b]) if len(out[b]) < caps[b] - 1 else EOS
            if tok in (PAD, BOS):
                tok = _best_non_special(logp[b])
            out[b].append(tok)
            if tok == EOS:
                done[b] = True
        if done.all():
            break
        cur = np.array([s[-1] for s in out], dtype=np.int64)
    for b in range(B):
        if out[b][-1] != EOS:
            out[b].append(EOS)
    return out


def _best_non_special(logp: np.ndarray) -> int:
    lp = logp.copy()
    lp[[PAD, BOS]] = -np.inf
    return int(lp.argmax())


def beam_decode(params: ModelParams, batch: Batch, tgt_lang, cfg: DecodeConfig) -> list[list[int]]:
    K = cfg.beam_size
    results = []
    for b in range(batch.size):
        one = batch.select([b])
        results.append(_beam_one(params, one, tgt_lang, cfg, K))
    return results


def _beam_one(params: ModelParams, one: Batch, tgt_lang, cfg: DecodeConfig, K: int) -> list[int]:
    cap = cfg.cap(int(one.lengths[0]), params.config.max_len)
    enc = _encode_np(params, one)
    dec = IncrementalDecoder(params, enc, one.pad_mask, np.array([int(np.asarray(tgt_lang).reshape(-1)[0])]))
    hyps = [[BOS]]
    scores = np.zeros(1)
    finished: list[tuple[float, list[int]]] = []

    def norm(score, length):
        return score / (length ** cfg.length_penalty) if cfg.length_penalty else score

    while True:
        logp = dec.step(np.array([h[-1] for h in hyps], dtype=np.int64))
        logp[:, PAD] = -np.inf
        logp[:, BOS] = -np.inf
        if len(hyps[0]) >= cap - 1:
            # forced stop: every live hypothesis ends here
            for h, s, lp in zip(hyps, scores, logp):
                finished.append((norm(s + lp[EOS], len(h) + 1), h + [EOS]))
            break
        V = logp.shape[1]
        total = (scores[:, None] + logp).reshape(-1)
        order = np.argsort(-total, kind="stable")[: 2 * K]
        keep_rows, keep_tok, keep_scores = [], [], []
        for idx in order:
            row, tok = divmod(int(idx), V)
            if tok == EOS:
                if len(finished) < K:
                    finished.append((norm(total[idx], len(hyps[row]) + 1), hyps[row] + [EOS]))
            elif len(keep_rows) < K:
                keep_rows.append(row)
                keep_tok.append(tok)
                keep_scores.append(total[idx])
            if len(finished) >= K or (len(keep_rows) >= K and len(finished) + len(keep_rows) >= 2 * K):
                break
        if len(finished) >= K or not keep_rows:
            break
        rows = np.array(keep_rows)
        dec.reorder(rows)
        hyps = [hyps[r] + [t] for r, t in zip(keep_rows, keep_tok)]
        scores = np.array(keep_scores)
    best = max(finished, key=lambda x: x[0])
    return best[1]


def translate(src, src_lang, tgt_lang, params: ModelParams, cfg: DecodeConfig | None = None) -> list[list[int]]:
    """Translate framed id sequences into ``tgt_lang``; outputs are framed too."""
    cfg = cfg or DecodeConfig()
    batch = _as_batch(src, src_lang)
    if cfg.strategy == "beam":
        return beam_decode(params, batch, tgt_lang, cfg)
    return greedy_decode(params, batch, tgt_lang, cfg)


def translate_lines(params: ModelParams, seqs, src_lang: int, tgt_lang: int, cfg: DecodeConfig | None = None,
                    chunk: int = 64) -> list[list[int]]:
    """Batched translation in length-sorted chunks, returned in input order."""
    order = sorted(range(len(seqs)), key=lambda i: len(seqs[i]))
    out: list[list[int] | None] = [None] * len(seqs)
    for s in range(0, len(order), chunk):
        idx = order[s:s + chunk]
        for i, hyp in zip(idx, translate([seqs[i] for i in idx], src_lang, tgt_lang, params, cfg)):
            out[i] = hyp
    return out


def generate_pseudo_pairs(batch: Batch, gen_lang: int, params: ModelParams, cfg: DecodeConfig | None = None) -> list[PseudoPair]:
    """Translate every sentence of a monolingual batch into ``gen_lang``.

    Each pair holds the generated sentence as source and the untouched
    original as target.
    """
    src_lang = int(batch.langs[0])
    generated = translate(batch, batch.langs, gen_lang, params, cfg)
    return [PseudoPair(g, orig, gen_lang, src_lang) for g, orig in zip(generated, batch.sequences())]


def zero_shot_translate(src, src_lang: int, tgt_lang: int, params: ModelParams, cfg: DecodeConfig | None = None,
                        pivot: int = 0) -> list[list[int]]:
    """Translation between two non-pivot languages; mechanics as :func:`translate`."""
    if src_lang == pivot or tgt_lang == pivot:
        raise ValueError("zero-shot directions exclude the pivot language")
    if src_lang == tgt_lang:
        raise ValueError("zero-shot translation needs two distinct languages")
    return translate(src, src_lang, tgt_lang, params, cfg)
