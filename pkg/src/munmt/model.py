"""Shared-encoder / shared-decoder transformer.

One encoder and one decoder serve every language.  Inputs are the sum of a
token, a learned position and a language embedding; layers are pre-norm.  The
output projection is the token embedding itself (weight tying), so the
masked-LM head and the decoder share it.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .config import ConfigError, apply_config, config_dict, dump_config, parse_config
from .data.batching import Batch
from .data.bpe import PAD
from .tensor import Tensor

NEG_INF = -1e9


@dataclass
class TransformerConfig:
    n_layers: int = 6
    d_model: int = 1024
    n_heads: int = 8
    d_ff: int = 4096
    max_len: int = 256
    vocab_size: int = 80000
    n_languages: int = 13
    n_dec_layers: int | None = None
    dropout: float = 0.0
    attention_dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")

    @property
    def dec_layers(self) -> int:
        return self.n_layers if self.n_dec_layers is None else self.n_dec_layers

    @classmethod
    def desk(cls, **overrides) -> "TransformerConfig":
        base = dict(n_layers=2, d_model=64, n_heads=4, d_ff=128, max_len=64)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def paper(cls, **overrides) -> "TransformerConfig":
        return cls(**overrides)


def diff_configs(a: TransformerConfig, b: TransformerConfig, ignore=("dropout", "attention_dropout")) -> list[str]:
    return [f.name for f in fields(a) if f.name not in ignore and getattr(a, f.name) != getattr(b, f.name)]


class ModelParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: TransformerConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def has_decoder(self) -> bool:
        return "dec.ln_f.g" in self.tensors

    @property
    def output_projection(self) -> Tensor:
        # tied: literally the token embedding
        return self.tensors["tok_emb"]

    def copy(self, requires_grad: bool | None = None) -> "ModelParams":
        out = {}
        for n, t in self.tensors.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            out[n] = Tensor(t.data.copy(), requires_grad=rg, name=n)
        return ModelParams(self.config, out)

    def frozen(self) -> "ModelParams":
        return self.copy(requires_grad=False)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


# ---------------------------------------------------------------------------
# initialization


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, (fan_in, fan_out))


def _attn_params(rng, prefix: str, d: int) -> dict[str, np.ndarray]:
    out = {}
    for w in ("q", "k", "v", "o"):
        out[f"{prefix}.w{w}"] = _xavier(rng, d, d)
        out[f"{prefix}.b{w}"] = np.zeros(d)
    return out


def _ln_params(prefix: str, d: int) -> dict[str, np.ndarray]:
    return {f"{prefix}.g": np.ones(d), f"{prefix}.b": np.zeros(d)}


def _ffn_params(rng, prefix: str, d: int, d_ff: int) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.w1": _xavier(rng, d, d_ff),
        f"{prefix}.b1": np.zeros(d_ff),
        f"{prefix}.w2": _xavier(rng, d_ff, d),
        f"{prefix}.b2": np.zeros(d),
    }


def _encoder_arrays(cfg: TransformerConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d = cfg.d_model
    arrs = {
        "tok_emb": rng.normal(0.0, d**-0.5, (cfg.vocab_size, d)),
        "pos_emb": rng.normal(0.0, d**-0.5, (cfg.max_len, d)),
        "lang_emb": rng.normal(0.0, d**-0.5, (cfg.n_languages, d)),
        "out_bias": np.zeros(cfg.vocab_size),
    }
    arrs["tok_emb"][PAD] = 0.0
    for i in range(cfg.n_layers):
        p = f"enc.{i}"
        arrs.update(_ln_params(f"{p}.ln1", d))
        arrs.update(_attn_params(rng, f"{p}.attn", d))
        arrs.update(_ln_params(f"{p}.ln2", d))
        arrs.update(_ffn_params(rng, f"{p}.ffn", d, cfg.d_ff))
    arrs.update(_ln_params("enc.ln_f", d))
    return arrs


def _decoder_layer_arrays(cfg: TransformerConfig, i: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d = cfg.d_model
    p = f"dec.{i}"
    arrs = {}
    arrs.update(_ln_params(f"{p}.ln1", d))
    arrs.update(_attn_params(rng, f"{p}.self", d))
    arrs.update(_ln_params(f"{p}.ln_x", d))
    arrs.update(_attn_params(rng, f"{p}.cross", d))
    arrs.update(_ln_params(f"{p}.ln2", d))
    arrs.update(_ffn_params(rng, f"{p}.ffn", d, cfg.d_ff))
    return arrs


def _wrap(cfg: TransformerConfig, arrs: dict[str, np.ndarray], requires_grad=True) -> ModelParams:
    dt = T.get_default_dtype()
    return ModelParams(cfg, {n: Tensor(a.astype(dt), requires_grad=requires_grad, name=n) for n, a in arrs.items()})


def init_lm(cfg: TransformerConfig, rng: np.random.Generator) -> ModelParams:
    """Encoder-only parameters for masked-LM pretraining."""
    return _wrap(cfg, _encoder_arrays(cfg, rng))


def init_unmt(cfg: TransformerConfig, rng: np.random.Generator) -> ModelParams:
    """Fresh encoder-decoder parameters."""
    arrs = _encoder_arrays(cfg, rng)
    for i in range(cfg.dec_layers):
        arrs.update(_decoder_layer_arrays(cfg, i, rng))
    arrs.update(_ln_params("dec.ln_f", cfg.d_model))
    return _wrap(cfg, arrs)


def init_unmt_from_pretrained(lm: ModelParams, config: TransformerConfig | None = None,
                              rng: np.random.Generator | None = None) -> ModelParams:
    """Build encoder-decoder parameters from a pretrained encoder.

    The encoder is copied as is.  Decoder layer ``i`` takes its self-attention,
    feed-forward and layer norms from encoder layer ``i``; cross-attention
    weights are drawn fresh (Xavier-uniform) and their layer norm starts at
    identity.
    """
    cfg = lm.config if config is None else config
    diffs = diff_configs(lm.config, cfg)
    if diffs:
        detail = ", ".join(f"{n}: {getattr(lm.config, n)} != {getattr(cfg, n)}" for n in diffs)
        raise ConfigError(f"pretrained config differs from target config ({detail})")
    if cfg.dec_layers > cfg.n_layers:
        raise ConfigError(f"cannot initialize {cfg.dec_layers} decoder layers from {cfg.n_layers} encoder layers")
    rng = np.random.default_rng() if rng is None else rng
    d = cfg.d_model
    arrs = {n: t.data.copy() for n, t in lm.items() if not n.startswith("dec.")}
    for i in range(cfg.dec_layers):
        src, dst = f"enc.{i}", f"dec.{i}"
        for part in ("ln1.g", "ln1.b", "ln2.g", "ln2.b"):
            arrs[f"{dst}.{part}"] = lm[f"{src}.{part}"].data.copy()
        for w in ("q", "k", "v", "o"):
            arrs[f"{dst}.self.w{w}"] = lm[f"{src}.attn.w{w}"].data.copy()
            arrs[f"{dst}.self.b{w}"] = lm[f"{src}.attn.b{w}"].data.copy()
        for part in ("w1", "b1", "w2", "b2"):
            arrs[f"{dst}.ffn.{part}"] = lm[f"{src}.ffn.{part}"].data.copy()
        arrs.update(_ln_params(f"{dst}.ln_x", d))
        arrs.update(_attn_params(rng, f"{dst}.cross", d))
    arrs["dec.ln_f.g"] = lm["enc.ln_f.g"].data.copy()
    arrs["dec.ln_f.b"] = lm["enc.ln_f.b"].data.copy()
    ordered = {n: arrs[n] for n in init_unmt_names(cfg)}
    return ModelParams(cfg, {n: Tensor(a, requires_grad=True, name=n) for n, a in ordered.items()})


def init_unmt_names(cfg: TransformerConfig) -> list[str]:
    names = _encoder_names(cfg)
    for i in range(cfg.dec_layers):
        names += _decoder_layer_names(i)
    names += ["dec.ln_f.g", "dec.ln_f.b"]
    return names


def _encoder_names(cfg: TransformerConfig) -> list[str]:
    names = ["tok_emb", "pos_emb", "lang_emb", "out_bias"]
    for i in range(cfg.n_layers):
        p = f"enc.{i}"
        names += [f"{p}.ln1.g", f"{p}.ln1.b"]
        names += [f"{p}.attn.{k}{w}" for w in "qkvo" for k in "wb"]
        names += [f"{p}.ln2.g", f"{p}.ln2.b"]
        names += [f"{p}.ffn.{x}" for x in ("w1", "b1", "w2", "b2")]
    names += ["enc.ln_f.g", "enc.ln_f.b"]
    return names


def _decoder_layer_names(i: int) -> list[str]:
    p = f"dec.{i}"
    names = [f"{p}.ln1.g", f"{p}.ln1.b"]
    names += [f"{p}.self.{k}{w}" for w in "qkvo" for k in "wb"]
    names += [f"{p}.ln_x.g", f"{p}.ln_x.b"]
    names += [f"{p}.cross.{k}{w}" for w in "qkvo" for k in "wb"]
    names += [f"{p}.ln2.g", f"{p}.ln2.b"]
    names += [f"{p}.ffn.{x}" for x in ("w1", "b1", "w2", "b2")]
    return names


def expected_shapes(cfg: TransformerConfig, with_decoder: bool = True) -> dict[str, tuple[int, ...]]:
    d, V = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {}
    names = _encoder_names(cfg)
    if with_decoder:
        for i in range(cfg.dec_layers):
            names += _decoder_layer_names(i)
        names += ["dec.ln_f.g", "dec.ln_f.b"]
    for n in names:
        leaf = n.rsplit(".", 1)[-1]
        if n == "tok_emb":
            shapes[n] = (V, d)
        elif n == "pos_emb":
            shapes[n] = (cfg.max_len, d)
        elif n == "lang_emb":
            shapes[n] = (cfg.n_languages, d)
        elif n == "out_bias":
            shapes[n] = (V,)
        elif leaf == "w1":
            shapes[n] = (d, cfg.d_ff)
        elif leaf == "b1":
            shapes[n] = (cfg.d_ff,)
        elif leaf == "w2":
            shapes[n] = (cfg.d_ff, d)
        elif leaf in ("wq", "wk", "wv", "wo"):
            shapes[n] = (d, d)
        else:
            shapes[n] = (d,)
    return shapes


# ---------------------------------------------------------------------------
# forward


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, L, d = x.shape
    return T.transpose(T.reshape(x, (B, L, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, L, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, L, H * dh))


def _mha(p: ModelParams, prefix: str, xq: Tensor, xkv: Tensor, bias: np.ndarray | None) -> Tensor:
    H = p.config.n_heads
    q = _split_heads(T.linear(xq, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), H)
    k = _split_heads(T.linear(xkv, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), H)
    v = _split_heads(T.linear(xkv, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), H)
    return T.linear(_merge_heads(T.attention(q, k, v, bias)), p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _ln(p: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def _ffn(p: ModelParams, prefix: str, x: Tensor) -> Tensor:
    h = T.gelu(T.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return T.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _embed(p: ModelParams, tokens: np.ndarray, langs: np.ndarray) -> Tensor:
    B, L = tokens.shape
    cfg = p.config
    if L > cfg.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    if tokens.size and tokens.max() >= cfg.vocab_size:
        raise IndexError(f"token id {int(tokens.max())} out of range for vocab_size {cfg.vocab_size}")
    langs = np.asarray(langs, dtype=np.int64)
    if langs.size and (langs.min() < 0 or langs.max() >= cfg.n_languages):
        raise IndexError(f"language id out of range for n_languages {cfg.n_languages}")
    x = T.embedding(p["tok_emb"], tokens)
    x = T.add(x, T.embedding(p["pos_emb"], np.arange(L)))
    x = T.add(x, T.reshape(T.embedding(p["lang_emb"], langs), (B, 1, cfg.d_model)))
    return x


def real_mask(tokens_or_mask: np.ndarray) -> np.ndarray:
    """Boolean ``[B, L]`` of real positions; a boolean input is taken as is."""
    a = np.asarray(tokens_or_mask)
    return a if a.dtype == bool else a != PAD


def padding_bias(tokens_or_mask: np.ndarray) -> np.ndarray:
    """Additive key mask ``[B, 1, 1, L]``: 0 at real positions, -1e9 at padding.

    Accepts token ids (PAD marks padding) or a boolean real-position mask.
    """
    dt = T.get_default_dtype()
    return np.where(real_mask(tokens_or_mask), 0.0, NEG_INF).astype(dt)[:, None, None, :]


def causal_bias(L: int) -> np.ndarray:
    dt = T.get_default_dtype()
    return np.triu(np.full((L, L), NEG_INF), 1).astype(dt)[None, None]


def encode_tokens(p: ModelParams, tokens: np.ndarray, langs, mask: np.ndarray | None = None) -> Tensor:
    bias = padding_bias(tokens if mask is None else mask)
    x = _embed(p, tokens, langs)
    for i in range(p.config.n_layers):
        pre = f"enc.{i}"
        x = T.add(x, _self_attn(p, f"{pre}.attn", _ln(p, f"{pre}.ln1", x), bias))
        x = T.add(x, _ffn(p, f"{pre}.ffn", _ln(p, f"{pre}.ln2", x)))
    return _ln(p, "enc.ln_f", x)


def _self_attn(p: ModelParams, prefix: str, h: Tensor, bias) -> Tensor:
    return _mha(p, prefix, h, h, bias)


def encode(batch: Batch, params: ModelParams) -> Tensor:
    """Encoder states ``[B, L, d]`` for a batch in its own languages."""
    return encode_tokens(params, batch.tokens, batch.langs, batch.pad_mask)


def decode_teacher_forced(encoded: Tensor, src_mask: np.ndarray, target_ids: np.ndarray, target_lang,
                          params: ModelParams) -> Tensor:
    """Decoder logits ``[B, Lt, V]``; position t sees target positions <= t.

    ``src_mask`` is the boolean real-position mask of the source, or its
    token ids.
    """
    target_ids = np.asarray(target_ids, dtype=np.int64)
    B, Lt = target_ids.shape
    src_mask = np.asarray(src_mask)
    if encoded.shape[0] != B or encoded.shape[1] != src_mask.shape[1]:
        raise T.ShapeError(f"encoded states {encoded.shape} do not match source {src_mask.shape} / target {target_ids.shape}")
    cfg = params.config
    langs = np.broadcast_to(np.asarray(target_lang, dtype=np.int64), (B,))
    src_bias = padding_bias(src_mask)
    self_bias = causal_bias(Lt) + padding_bias(target_ids)
    y = _embed(params, target_ids, langs)
    for i in range(cfg.dec_layers):
        pre = f"dec.{i}"
        y = T.add(y, _self_attn(params, f"{pre}.self", _ln(params, f"{pre}.ln1", y), self_bias))
        y = T.add(y, _mha(params, f"{pre}.cross", _ln(params, f"{pre}.ln_x", y), encoded, src_bias))
        y = T.add(y, _ffn(params, f"{pre}.ffn", _ln(params, f"{pre}.ln2", y)))
    y = _ln(params, "dec.ln_f", y)
    return output_logits(params, y)


def output_logits(params: ModelParams, h: Tensor) -> Tensor:
    return T.linear(h, T.transpose(params.output_projection, (1, 0)), params["out_bias"])


def mlm_forward(tokens: np.ndarray, langs, positions: np.ndarray, params: ModelParams) -> Tensor:
    """Vocabulary logits ``[n_masked, V]`` at flat ``positions`` of ``tokens``."""
    positions = np.asarray(positions, dtype=np.int64)
    enc = encode_tokens(params, tokens, langs)
    flat = T.reshape(enc, (-1, params.config.d_model))
    picked = T.embedding(flat, positions)
    return output_logits(params, picked)


# ---------------------------------------------------------------------------
# checkpoint files

MAGIC = b"MUKD"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def write_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict[str, object]) -> None:
    """Write ``tensors`` and a key=value ``meta`` block; atomic via rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    block = dump_config(meta).encode("utf-8")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(block)))
        fh.write(block)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(a.tobytes())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (blen,) = r.unpack("<Q", "config block length")
    meta = parse_config(r.take(blen, "config block").decode("utf-8"))
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for k in range(count):
        (nlen,) = r.unpack("<I", f"name of tensor #{k}")
        name = r.take(nlen, f"name of tensor #{k}").decode("utf-8")
        (rank,) = r.unpack("<I", f"rank of tensor {name!r}")
        dims = r.unpack(f"<{rank}Q", f"dims of tensor {name!r}")
        n = int(np.prod(dims)) if rank else 1
        raw = r.take(4 * n, f"data of tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return tensors, meta


def model_meta(cfg: TransformerConfig, prefix: str = "model.") -> dict[str, object]:
    return {prefix + k: v for k, v in config_dict(cfg).items()}


def config_from_meta(meta: dict[str, str], prefix: str = "model.") -> TransformerConfig:
    vals = {k[len(prefix):]: v for k, v in meta.items() if k.startswith(prefix)}
    return apply_config(TransformerConfig(), vals)


def params_from_arrays(cfg: TransformerConfig, arrays: dict[str, np.ndarray], with_decoder: bool) -> ModelParams:
    """Validate names and shapes against ``cfg`` and wrap as parameters."""
    shapes = expected_shapes(cfg, with_decoder)
    out = {}
    for name, shape in shapes.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        a = arrays[name]
        if tuple(a.shape) != shape:
            raise CheckpointError(f"tensor {name!r} has shape {tuple(a.shape)}, expected {shape}")
        if not np.isfinite(a).all():
            raise CheckpointError(f"tensor {name!r} holds non-finite values")
        out[name] = Tensor(a.copy(), requires_grad=True, name=name)
    return ModelParams(cfg, out)


def save_params(params: ModelParams, path, extra_meta: dict[str, object] | None = None) -> None:
    meta = model_meta(params.config)
    meta["kind"] = "unmt" if params.has_decoder else "lm"
    if extra_meta:
        meta.update(extra_meta)
    write_checkpoint(path, params.arrays(), meta)


def load_params(path) -> ModelParams:
    arrays, meta = read_checkpoint(path)
    cfg = config_from_meta(meta)
    return params_from_arrays(cfg, arrays, with_decoder=meta.get("kind", "unmt") == "unmt")
