"""Training loops: MLM pretraining, bilingual and multilingual UNMT, KD, fine-tuning.

One multilingual step follows the fixed structure

* phase A: for every language, one denoising update;
* phase B: for every non-pivot language ``j``, one update on a pivot batch
  back-translated through ``j`` and one update on a ``j`` batch
  back-translated through the pivot, each optionally with a KD term.

Every loss gets its own optimizer update.  Batch sampling and noise draw from
one generator; the SKD choice of the third language draws from a second one,
so switching KD on never perturbs the rest of the run.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field, fields
from itertools import permutations
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import apply_config, config_dict, dump_config, read_config
from .data.batching import Batch, make_batches
from .data.languages import LanguageBranchMap
from .data.noise import NoiseConfig
from .decoding import DecodeConfig, generate_pseudo_pairs, translate
from .model import (CheckpointError, ModelParams, TransformerConfig, config_from_meta, init_lm,
                    init_unmt_from_pretrained, model_meta, params_from_arrays, read_checkpoint, write_checkpoint)
from .objectives import KdConfig, bt_kd_losses, combine_kd, denoising_loss, mlm_loss
from .optim import Adam

log = logging.getLogger(__name__)

PAPER_PROFILE: dict[str, object] = dict(
    n_layers=6, d_model=1024, n_heads=8, d_ff=4096, max_len=256,
    vocab_size=80000, token_budget=2000,
)
# a 64-wide model needs a larger step than the full-size 1e-4 to learn within a desk budget
DESK_PROFILE: dict[str, object] = dict(
    n_layers=2, d_model=64, n_heads=4, d_ff=128, max_len=64,
    vocab_size=1600, token_budget=400, lr=1e-3, lm_steps=2000, steps=4000,
)
PROFILES = {"paper": PAPER_PROFILE, "desk": DESK_PROFILE}


@dataclass
class TrainConfig:
    """Flat run configuration; every field can be set from a key=value file."""

    languages: list[str] = field(default_factory=list)
    branches: dict[str, str] = field(default_factory=dict)
    steps: int = 1000
    lm_steps: int = 1000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    clip_norm: float = 0.0
    token_budget: int = 2000
    vocab_size: int = 80000
    max_words: int = 50
    p_drop: float = 0.1
    k_swap: int = 3
    mask_rate: float = 0.15
    alpha: float = 0.1
    temperature: float = 2.0
    kd_mode: str = "none"
    strategy: str = "greedy"
    beam_size: int = 1
    max_len_factor: float = 1.5
    max_len_margin: int = 5
    length_penalty: float = 1.0
    n_layers: int = 6
    d_model: int = 1024
    n_heads: int = 8
    d_ff: int = 4096
    max_len: int = 256
    seed: int = 0
    checkpoint_every: int = 0
    profile: str = "paper"

    @classmethod
    def for_profile(cls, profile: str = "desk", **overrides) -> "TrainConfig":
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
        cfg = cls(profile=profile, **PROFILES[profile])
        for k, v in overrides.items():
            if not hasattr(cfg, k):
                raise ValueError(f"unknown TrainConfig field {k!r}")
            setattr(cfg, k, v)
        return cfg

    @classmethod
    def from_file(cls, path, profile: str | None = None) -> "TrainConfig":
        values = read_config(path)
        base = cls.for_profile(profile or values.get("profile", "paper"))
        return apply_config(base, values)

    def to_text(self) -> str:
        return dump_config(config_dict(self))

    def noise(self) -> NoiseConfig:
        return NoiseConfig(p_drop=self.p_drop, k_swap=self.k_swap, seed=self.seed)

    def kd(self) -> KdConfig:
        return KdConfig(alpha=self.alpha, temperature=self.temperature, mode=self.kd_mode)

    def decode(self) -> DecodeConfig:
        return DecodeConfig(strategy=self.strategy, beam_size=self.beam_size, max_len_factor=self.max_len_factor,
                            max_len_margin=self.max_len_margin, length_penalty=self.length_penalty)

    def model_config(self, vocab_size: int, n_languages: int) -> TransformerConfig:
        return TransformerConfig(n_layers=self.n_layers, d_model=self.d_model, n_heads=self.n_heads, d_ff=self.d_ff,
                                 max_len=self.max_len, vocab_size=vocab_size, n_languages=n_languages)


# ---------------------------------------------------------------------------
# directions and manifests


def all_directions(languages) -> list[tuple[str, str]]:
    return list(permutations(languages, 2))


def trained_directions(languages) -> list[tuple[str, str]]:
    pivot, rest = languages[0], languages[1:]
    out = []
    for lang in rest:
        out += [(pivot, lang), (lang, pivot)]
    return out


def untrained_directions(languages) -> list[tuple[str, str]]:
    trained = set(trained_directions(languages))
    return [d for d in all_directions(languages) if d not in trained]


def _pair(a: str, b: str) -> str:
    return f"{a}-{b}"


def _split_pair(text: str) -> tuple[str, str]:
    a, b = text.split("-", 1)
    return a, b


@dataclass
class RunManifest:
    kind: str
    languages: list[str]
    records: list[tuple[int, str, str, float]] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    @property
    def trained(self) -> list[tuple[str, str]]:
        return [] if self.kind == "LM" else trained_directions(self.languages)

    @property
    def untrained(self) -> list[tuple[str, str]]:
        return all_directions(self.languages) if self.kind == "LM" else untrained_directions(self.languages)

    def record(self, step: int, kind: str, pair: str, value: float) -> None:
        self.records.append((step, kind, pair, float(value)))

    def count(self, step: int | None = None, kind: str | None = None) -> int:
        return sum(1 for r in self.records if (step is None or r[0] == step) and (kind is None or r[1] == kind))

    def values(self, kind: str, pair: str | None = None) -> list[float]:
        return [r[3] for r in self.records if r[1] == kind and (pair is None or r[2] == pair)]

    def to_text(self) -> str:
        lines = ["step\tkind\tpair\tvalue"]
        lines += [f"{s}\t{k}\t{p}\t{v!r}" for s, k, p, v in self.records]
        lines.append(f"# run_kind\t{self.kind}")
        lines.append(f"# languages\t{','.join(self.languages)}")
        lines.append(f"# trained\t{','.join(_pair(*d) for d in self.trained)}")
        lines.append(f"# untrained\t{','.join(_pair(*d) for d in self.untrained)}")
        lines.append(f"# checkpoints\t{','.join(self.checkpoints)}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> "RunManifest":
        summary: dict[str, str] = {}
        records = []
        for line in text.splitlines():
            if not line or line.startswith("step\t"):
                continue
            if line.startswith("# "):
                key, _, value = line[2:].partition("\t")
                summary[key] = value
                continue
            s, k, p, v = line.split("\t")
            records.append((int(s), k, p, float(v)))
        langs = [x for x in summary.get("languages", "").split(",") if x]
        ckpts = [x for x in summary.get("checkpoints", "").split(",") if x]
        return cls(summary.get("run_kind", ""), langs, records, ckpts)

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# trainer


@dataclass
class TrainState:
    """Everything besides the weights that a bit-exact resume needs."""

    kind: str
    step: int
    config: TrainConfig
    languages: list[str]
    lang_ids: dict[str, int]
    adam_t: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    kd_rng: dict = field(default_factory=dict)


class Trainer:
    """Owns the parameters, optimizer and generators of one run.

    ``kind`` is ``"LM"`` for masked-LM pretraining; any other value runs the
    UNMT step with ``languages[0]`` as the pivot.
    """

    def __init__(self, params: ModelParams, data: dict[str, list[list[int]]], lang_ids: dict[str, int],
                 cfg: TrainConfig, kind: str, languages: list[str] | None = None,
                 teachers: dict[str, ModelParams] | None = None, branch_map: LanguageBranchMap | None = None):
        self.params = params
        self.cfg = cfg
        self.kind = kind
        self.languages = list(languages if languages is not None else cfg.languages or list(data))
        self.lang_ids = dict(lang_ids)
        for lang in self.languages:
            if lang not in data or not data[lang]:
                raise ValueError(f"empty or missing corpus for language {lang!r}")
            if lang not in self.lang_ids:
                raise ValueError(f"language {lang!r} has no id")
        self.lang_names = {self.lang_ids[lang]: lang for lang in self.languages}
        self.pivot = self.languages[0]
        self.noise = cfg.noise()
        self.kdc = cfg.kd()
        self.dec = cfg.decode()
        self.teachers = teachers or {}
        self.branch_map = branch_map
        if kind != "LM":
            self._check_kd()
        self.batches = {lang: make_batches(data[lang], self.lang_ids[lang], cfg.token_budget)
                        for lang in self.languages}
        self.opt = Adam(params.tensors, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                        clip_norm=cfg.clip_norm or None)
        self.rng = np.random.default_rng(cfg.seed)
        self.kd_rng = np.random.default_rng([cfg.seed, 1])
        self.step = 0
        self.counters: Counter = Counter()
        self.manifest = RunManifest(kind, list(self.languages))

    def _check_kd(self) -> None:
        mode = self.kdc.mode
        if mode == "skd" and len(self.languages) < 3:
            raise ValueError("SKD needs at least three languages")
        if mode == "lbkd":
            if self.branch_map is None:
                raise ValueError("LBKD needs a language branch map")
            for lang in self.languages[1:]:
                b = self.branch_map.branch(lang)
                if b not in self.teachers:
                    raise ValueError(f"no LBKD teacher for branch {b!r}")

    # -- helpers

    def _sample(self, lang: str) -> Batch:
        bs = self.batches[lang]
        return bs[int(self.rng.integers(len(bs)))]

    def _update(self, loss: T.Tensor) -> float:
        value = float(loss.data)
        if not loss.requires_grad:
            # every pair was dropped; nothing to learn from this batch
            T.get_tape().clear()
            return value
        T.backward(loss)
        self.opt.step()
        return value

    def choose_z(self, via: str, tgt: str) -> str:
        """Uniform draw of the SKD third language among those outside the pair and the pivot."""
        eligible = [lang for lang in self.languages if lang not in (self.pivot, via, tgt)]
        return eligible[int(self.kd_rng.integers(len(eligible)))]

    # -- steps

    def _lm_step(self, q: int) -> None:
        lang = self.languages[(q - 1) % len(self.languages)]
        loss = mlm_loss(self._sample(lang), self.params, self.rng, self.cfg.mask_rate)
        self.manifest.record(q, "mlm", lang, self._update(loss))

    def _bt_update(self, q: int, batch: Batch, via: str) -> None:
        """Back-translate ``batch`` through language ``via`` and train ``via -> batch language``."""
        tgt = self.lang_names[int(batch.langs[0])]
        frozen = self.params
        with T.no_grad():
            pairs = generate_pseudo_pairs(batch, self.lang_ids[via], frozen, self.dec)
        z_sources = z_id = teacher = None
        z = None
        if self.kdc.mode == "skd":
            z = self.choose_z(via, tgt)
            z_id = self.lang_ids[z]
            with T.no_grad():
                z_sources = translate(batch, batch.langs, z_id, frozen, self.dec)
        elif self.kdc.mode == "lbkd":
            other = via if tgt == self.pivot else tgt
            teacher = self.teachers[self.branch_map.branch(other)]
        l_mb, l_kd = bt_kd_losses(pairs, self.params, self.kdc, z_sources=z_sources, z_lang=z_id,
                                  teacher=teacher, counters=self.counters)
        pair = _pair(via, tgt)
        if l_kd is None:
            self.manifest.record(q, "bt", pair, self._update(l_mb))
            return
        self.manifest.record(q, "bt", pair, float(l_mb.data))
        self.manifest.record(q, self.kdc.mode, pair if z is None else f"{pair}:{z}", float(l_kd.data))
        self._update(combine_kd(l_mb, l_kd, self.kdc))

    def _unmt_step(self, q: int) -> None:
        for lang in self.languages:
            loss = denoising_loss(self._sample(lang), self.noise, self.params, self.rng)
            self.manifest.record(q, "dae", _pair(lang, lang), self._update(loss))
        for lang in self.languages[1:]:
            self._bt_update(q, self._sample(self.pivot), lang)
            self._bt_update(q, self._sample(lang), self.pivot)

    def train_step(self) -> None:
        q = self.step + 1
        if self.kind == "LM":
            self._lm_step(q)
        else:
            self._unmt_step(q)
        self.step = q

    def run(self, until: int, checkpoint_dir=None, log_every: int = 0) -> ModelParams:
        every = self.cfg.checkpoint_every
        while self.step < until:
            self.train_step()
            if log_every and self.step % log_every == 0:
                last = self.manifest.records[-1]
                log.info("%s step %d: %s %s %.4f", self.kind, self.step, last[1], last[2], last[3])
            if every and checkpoint_dir is not None and self.step % every == 0:
                path = Path(checkpoint_dir) / f"{self.kind.lower()}_step{self.step}.ckpt"
                self.save(path)
        return self.params

    # -- persistence

    def state(self) -> TrainState:
        st = self.opt.state
        return TrainState(self.kind, self.step, self.cfg, list(self.languages), dict(self.lang_ids), st.t,
                          dict(st.m), dict(st.v), self.rng.bit_generator.state, self.kd_rng.bit_generator.state)

    def save(self, path) -> None:
        save_checkpoint(self.params, self.state(), path)
        self.manifest.checkpoints.append(str(path))

    def load_state(self, state: TrainState) -> None:
        self.step = state.step
        self.opt.state.t = state.adam_t
        self.opt.state.m = {k: v.copy() for k, v in state.adam_m.items()}
        self.opt.state.v = {k: v.copy() for k, v in state.adam_v.items()}
        self.rng.bit_generator.state = state.rng
        self.kd_rng.bit_generator.state = state.kd_rng

    @classmethod
    def resume(cls, path, data, teachers=None, branch_map=None) -> "Trainer":
        params, state = load_checkpoint(path)
        tr = cls(params, data, state.lang_ids, state.config, state.kind, state.languages, teachers, branch_map)
        tr.load_state(state)
        return tr


def save_checkpoint(params: ModelParams, state: TrainState | None, path) -> None:
    """Weights plus optimizer moments and generator states in one file."""
    tensors = dict(params.arrays())
    meta: dict[str, object] = model_meta(params.config)
    meta["kind"] = "unmt" if params.has_decoder else "lm"
    if state is not None:
        for name, m in state.adam_m.items():
            tensors[f"adam.m.{name}"] = m
            tensors[f"adam.v.{name}"] = state.adam_v[name]
        meta.update({f"train.{k}": v for k, v in config_dict(state.config).items()})
        meta["state.kind"] = state.kind
        meta["state.step"] = state.step
        meta["state.languages"] = state.languages
        meta["state.lang_ids"] = json.dumps(state.lang_ids, sort_keys=True)
        meta["state.adam_t"] = state.adam_t
        meta["state.rng"] = json.dumps(state.rng)
        meta["state.kd_rng"] = json.dumps(state.kd_rng)
    write_checkpoint(path, tensors, meta)


def load_checkpoint(path) -> tuple[ModelParams, TrainState | None]:
    arrays, meta = read_checkpoint(path)
    cfg = config_from_meta(meta)
    weights = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    params = params_from_arrays(cfg, weights, with_decoder=meta.get("kind", "unmt") == "unmt")
    if "state.step" not in meta:
        return params, None
    try:
        tcfg = apply_config(TrainConfig(), {k[6:]: v for k, v in meta.items() if k.startswith("train.")})
        adam_m = {k[7:]: v for k, v in arrays.items() if k.startswith("adam.m.")}
        adam_v = {k[7:]: v for k, v in arrays.items() if k.startswith("adam.v.")}
        for name in adam_m:
            if name not in adam_v:
                raise CheckpointError(f"checkpoint is missing tensor 'adam.v.{name}'")
            if name not in weights:
                raise CheckpointError(f"optimizer state for unknown tensor {name!r}")
        state = TrainState(meta["state.kind"], int(meta["state.step"]), tcfg,
                           [x for x in meta["state.languages"].split(",") if x],
                           {k: int(v) for k, v in json.loads(meta["state.lang_ids"]).items()},
                           int(meta["state.adam_t"]), adam_m, adam_v,
                           json.loads(meta["state.rng"]), json.loads(meta["state.kd_rng"]))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad training state in {path}: {exc}") from None
    return params, state


# ---------------------------------------------------------------------------
# entry points


def _lang_ids(lang_ids, languages) -> dict[str, int]:
    if lang_ids is None:
        return {lang: i for i, lang in enumerate(languages)}
    return dict(lang_ids)


def pretrain_mlm(corpora: dict[str, list[list[int]]], config: TrainConfig, vocab_size: int,
                 lang_ids: dict[str, int] | None = None, steps: int | None = None) -> tuple[ModelParams, RunManifest]:
    """Masked-LM pretraining of the shared encoder, languages taken round-robin."""
    languages = config.languages or list(corpora)
    for lang in languages:
        if not corpora.get(lang):
            raise ValueError(f"empty corpus for language {lang!r}")
    ids = _lang_ids(lang_ids, languages)
    mcfg = config.model_config(vocab_size, max(ids.values()) + 1)
    params = init_lm(mcfg, np.random.default_rng([config.seed, 2]))
    tr = Trainer(params, corpora, ids, config, "LM", languages)
    tr.run(config.lm_steps if steps is None else steps)
    return tr.params, tr.manifest


def _unmt_start(theta0: ModelParams, seed: int) -> ModelParams:
    if theta0.has_decoder:
        return theta0.copy(requires_grad=True)
    return init_unmt_from_pretrained(theta0, rng=np.random.default_rng([seed, 3]))


def _run_unmt(kind, corpora, theta0, steps, config, languages, lang_ids, teachers=None, branch_map=None,
              checkpoint_dir=None) -> tuple[ModelParams, RunManifest]:
    ids = _lang_ids(lang_ids, languages)
    params = _unmt_start(theta0, config.seed)
    tr = Trainer(params, corpora, ids, config, kind, languages, teachers, branch_map)
    tr.run(steps, checkpoint_dir)
    return tr.params, tr.manifest


def train_unmt_pair(corpora: dict[str, list[list[int]]], theta0: ModelParams, steps: int, config: TrainConfig,
                    languages: list[str] | None = None, lang_ids: dict[str, int] | None = None,
                    kind: str = "SM", checkpoint_dir=None) -> tuple[ModelParams, RunManifest]:
    """Bilingual UNMT: denoising in both languages and back-translation both ways."""
    languages = list(languages or config.languages or corpora)
    if len(languages) != 2:
        raise ValueError(f"train_unmt_pair needs exactly 2 languages, got {len(languages)}")
    cfg = TrainConfig(**{f.name: getattr(config, f.name) for f in fields(TrainConfig)})
    cfg.kd_mode = "none"
    return _run_unmt(kind, corpora, theta0, steps, cfg, languages, lang_ids, checkpoint_dir=checkpoint_dir)


def train_munmt(corpora: dict[str, list[list[int]]], theta0: ModelParams, steps: int, config: TrainConfig,
                teachers: dict[str, ModelParams] | None = None, languages: list[str] | None = None,
                lang_ids: dict[str, int] | None = None, branch_map: LanguageBranchMap | None = None,
                checkpoint_dir=None) -> tuple[ModelParams, RunManifest]:
    """Multilingual UNMT with optional self or branch distillation."""
    languages = list(languages or config.languages or corpora)
    if branch_map is None and config.branches:
        branch_map = LanguageBranchMap.from_branches(config.branches)
    kind = {"none": "MUNMT", "skd": "SKD", "lbkd": "LBKD"}[config.kd_mode]
    return _run_unmt(kind, corpora, theta0, steps, config, languages, lang_ids, teachers, branch_map, checkpoint_dir)


def branch_languages(languages: list[str], branch_map: LanguageBranchMap, branch: str) -> list[str]:
    """Pivot first, then the branch members in their run order."""
    pivot = languages[0]
    members = [lang for lang in languages[1:] if branch_map.branch(lang) == branch]
    if not members and branch_map.branch(pivot) != branch:
        raise ValueError(f"no language of branch {branch!r} among {languages}")
    return [pivot] + members


def train_lbunmt(corpora: dict[str, list[list[int]]], theta0: ModelParams, steps: int, config: TrainConfig,
                 languages: list[str], branch_map: LanguageBranchMap, lang_ids: dict[str, int] | None = None,
                 ) -> tuple[ModelParams, RunManifest]:
    """Branch teacher: multilingual UNMT over one branch plus the pivot.

    ``languages`` is pivot first; every non-pivot language must share one
    branch.  The result is frozen.
    """
    branches = {branch_map.branch(lang) for lang in languages[1:]}
    if len(branches) > 1:
        raise ValueError(f"languages {languages[1:]} span several branches: {sorted(branches)}")
    cfg = TrainConfig(**{f.name: getattr(config, f.name) for f in fields(TrainConfig)})
    cfg.kd_mode = "none"
    params, manifest = _run_unmt("LBUNMT", corpora, theta0, steps, cfg, languages, lang_ids)
    return params.frozen(), manifest


def finetune_pair(params: ModelParams, corpora: dict[str, list[list[int]]], pair: tuple[str, str], steps: int,
                  config: TrainConfig, lang_ids: dict[str, int]) -> tuple[ModelParams, RunManifest]:
    """Continue bilingual training of a multilingual model on one pivot pair."""
    for lang in pair:
        if lang not in lang_ids:
            raise ValueError(f"unknown language {lang!r}")
    if not params.has_decoder:
        raise ValueError("fine-tuning needs a trained encoder-decoder")
    return train_unmt_pair(corpora, params, steps, config, list(pair), lang_ids, kind="FT")
