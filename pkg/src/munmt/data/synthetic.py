"""Synthetic cipher languages.

A base language is sampled from a word-level Markov model: each word has a
few preferred successors, mixed with a Zipfian unigram background.  Giving
every word its own context makes the ciphers recoverable from monolingual
statistics alone.  Every other language is the base language
pushed through a bijective word substitution and an optional deterministic
reordering, so gold translations between any two languages exist.

Monolingual corpora are independent samples per language.  The parallel test
sets come from one shared pool of base sentences.
"""

from __future__ import annotations

import hashlib
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..config import apply_config, config_dict, dump_config, read_config
from .corpus import read_lines, write_lines


class SyntheticSpecError(ValueError):
    pass


REORDER_RULES = ("none", "swap_pairs")


@dataclass
class SyntheticSpec:
    """Generator settings.  ``languages[0]`` is the base (pivot) language."""

    languages: list[str] = field(default_factory=lambda: ["base", "c1", "c2", "c3"])
    branches: dict[str, str] = field(default_factory=lambda: {"base": "A", "c1": "A", "c2": "B", "c3": "B"})
    n_words: int = 200
    successors: int = 4
    bigram_weight: float = 0.8
    zipf: float = 1.0
    min_len: int = 4
    max_len: int = 10
    n_sentences: int = 20000
    n_test: int = 200
    anchor_rate: float = 0.1
    branch_share: float = 0.7
    reorder: dict[str, str] = field(default_factory=dict)
    corpus_scale: dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def validate(self) -> None:
        if len(self.languages) < 2:
            raise SyntheticSpecError("need at least two languages")
        if len(set(self.languages)) != len(self.languages):
            raise SyntheticSpecError("duplicate language code")
        missing = [lang for lang in self.languages if lang not in self.branches]
        if missing:
            raise SyntheticSpecError(f"no branch for {missing}")
        for lang, rule in self.reorder.items():
            if rule not in REORDER_RULES:
                raise SyntheticSpecError(f"unknown reorder rule {rule!r} for {lang}")
        if self.reorder.get(self.languages[0], "none") != "none":
            raise SyntheticSpecError("the base language cannot be reordered")
        if not 0 <= self.anchor_rate <= 1 or not 0 <= self.branch_share <= 1:
            raise SyntheticSpecError("anchor_rate and branch_share must lie in [0, 1]")
        if not 1 <= self.min_len <= self.max_len:
            raise SyntheticSpecError("need 1 <= min_len <= max_len")
        if not 1 <= self.successors <= self.n_words:
            raise SyntheticSpecError("need 1 <= successors <= n_words")
        if not 0 <= self.bigram_weight <= 1:
            raise SyntheticSpecError("bigram_weight must lie in [0, 1]")

    @classmethod
    def from_file(cls, path) -> "SyntheticSpec":
        return apply_config(cls(), read_config(path))

    def to_text(self) -> str:
        return dump_config(config_dict(self))


def check_bijective(mapping: dict[str, str]) -> None:
    values = list(mapping.values())
    if len(set(values)) != len(values):
        seen: dict[str, str] = {}
        for k, v in mapping.items():
            if v in seen:
                raise SyntheticSpecError(f"substitution is not bijective: {seen[v]!r} and {k!r} both map to {v!r}")
            seen[v] = k


def reorder_words(words: list[str], rule: str) -> list[str]:
    if rule == "none":
        return list(words)
    if rule == "swap_pairs":
        out = list(words)
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return out
    raise SyntheticSpecError(f"unknown reorder rule {rule!r}")


# swap_pairs is an involution; listed explicitly for any future non-involutive rule
_INVERSE_RULE = {"none": "none", "swap_pairs": "swap_pairs"}


@dataclass
class Cipher:
    """Base-language word substitution plus a reordering rule."""

    mapping: dict[str, str]
    rule: str = "none"

    def __post_init__(self):
        check_bijective(self.mapping)
        self.inverse = {v: k for k, v in self.mapping.items()}

    def encipher(self, sentence: str) -> str:
        return " ".join(reorder_words([self.mapping.get(w, w) for w in sentence.split()], self.rule))

    def decipher(self, sentence: str) -> str:
        words = reorder_words(sentence.split(), _INVERSE_RULE[self.rule])
        return " ".join(self.inverse.get(w, w) for w in words)

    @property
    def substitution_only(self) -> bool:
        return self.rule == "none"


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    corpora: dict[str, list[str]]
    test: dict[str, list[str]]
    ciphers: dict[str, Cipher]

    @property
    def languages(self) -> list[str]:
        return list(self.spec.languages)

    @property
    def pivot(self) -> str:
        return self.spec.languages[0]

    def gold_translate(self, sentence: str, src: str, tgt: str) -> str:
        return self.ciphers[tgt].encipher(self.ciphers[src].decipher(sentence))

    def test_pair(self, src: str, tgt: str) -> tuple[list[str], list[str]]:
        return self.test[src], self.test[tgt]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for lang in self.languages:
            for line in self.corpora[lang]:
                h.update(line.encode())
                h.update(b"\n")
            for line in self.test[lang]:
                h.update(line.encode())
                h.update(b"\n")
        return h.hexdigest()

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "synthetic.cfg").write_text(self.spec.to_text(), encoding="utf-8")
        for lang in self.languages:
            write_lines(out / f"train.{lang}", self.corpora[lang])
            write_lines(out / f"test.{lang}", self.test[lang])
            c = self.ciphers[lang]
            write_lines(out / f"cipher.{lang}", [f"{k}\t{v}" for k, v in c.mapping.items()])

    @classmethod
    def load(cls, out_dir) -> "SyntheticCorpus":
        out = Path(out_dir)
        spec = SyntheticSpec.from_file(out / "synthetic.cfg")
        corpora, test, ciphers = {}, {}, {}
        for lang in spec.languages:
            corpora[lang] = read_lines(out / f"train.{lang}")
            test[lang] = read_lines(out / f"test.{lang}")
            mapping = dict(line.split("\t") for line in read_lines(out / f"cipher.{lang}"))
            ciphers[lang] = Cipher(mapping, spec.reorder.get(lang, "none"))
        return cls(spec, corpora, test, ciphers)


def _zipf_weights(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


class _BaseLanguage:
    def __init__(self, spec: SyntheticSpec, rng: np.random.Generator):
        self.spec = spec
        n = spec.n_words
        self.words = _fresh_forms(n, rng, taken=set())
        self.unigram_cdf = np.cumsum(_zipf_weights(n, spec.zipf)[np.argsort(rng.permutation(n))])
        k = spec.successors
        self.succ = np.stack([rng.choice(n, size=k, replace=False) for _ in range(n)])
        self.succ_cdf = np.cumsum(rng.dirichlet(np.ones(k), size=n), axis=1)

    def _unigram(self, u: np.ndarray) -> np.ndarray:
        return np.minimum(np.searchsorted(self.unigram_cdf, u, side="right"), self.spec.n_words - 1)

    def sample(self, n_sent: int, rng: np.random.Generator) -> list[str]:
        spec = self.spec
        lengths = rng.integers(spec.min_len, spec.max_len + 1, n_sent)
        L = spec.max_len
        words = np.empty((n_sent, L), dtype=np.int64)
        words[:, 0] = self._unigram(rng.random(n_sent))
        k = spec.successors
        for t in range(1, L):
            prev = words[:, t - 1]
            use_bigram = rng.random(n_sent) < spec.bigram_weight
            slot = np.minimum((rng.random(n_sent)[:, None] >= self.succ_cdf[prev]).sum(axis=1), k - 1)
            words[:, t] = np.where(use_bigram, self.succ[prev, slot], self._unigram(rng.random(n_sent)))
        vocab = self.words
        return [" ".join(vocab[w] for w in words[i, : lengths[i]]) for i in range(n_sent)]


_LETTERS = np.array(list(string.ascii_lowercase))


def _fresh_forms(n: int, rng: np.random.Generator, taken: set) -> list[str]:
    out = []
    while len(out) < n:
        ln = int(rng.integers(3, 6))
        w = "".join(rng.choice(_LETTERS, ln))
        if w in taken:
            continue
        taken.add(w)
        out.append(w)
    return out


def _build_ciphers(spec: SyntheticSpec, base_words: list[str], rng: np.random.Generator) -> dict[str, Cipher]:
    taken = set(base_words)
    n = len(base_words)
    n_anchor = int(round(spec.anchor_rate * n))
    order = rng.permutation(n)
    anchors = set(order[:n_anchor].tolist())
    free = [i for i in range(n) if i not in anchors]
    pivot = spec.languages[0]
    ciphers = {pivot: Cipher({w: w for w in base_words})}
    branch_forms: dict[str, list[str]] = {}
    for lang in spec.languages[1:]:
        b = spec.branches[lang]
        if b not in branch_forms:
            branch_forms[b] = _fresh_forms(n, rng, taken)
        shared_n = int(round(spec.branch_share * len(free)))
        shared = set(rng.permutation(free)[:shared_n].tolist())
        own = _fresh_forms(n, rng, taken)
        mapping = {}
        for i, w in enumerate(base_words):
            if i in anchors:
                mapping[w] = w
            elif i in shared:
                mapping[w] = branch_forms[b][i]
            else:
                mapping[w] = own[i]
        ciphers[lang] = Cipher(mapping, spec.reorder.get(lang, "none"))
    return ciphers


def gen_synthetic_corpus(spec: SyntheticSpec, rng: np.random.Generator | None = None) -> SyntheticCorpus:
    """Sample monolingual corpora and aligned test sets for every language."""
    spec.validate()
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    base = _BaseLanguage(spec, rng)
    ciphers = _build_ciphers(spec, base.words, rng)
    corpora = {}
    for lang in spec.languages:
        n = max(1, int(round(spec.n_sentences * spec.corpus_scale.get(lang, 1.0))))
        corpora[lang] = [ciphers[lang].encipher(s) for s in base.sample(n, rng)]
    pool = base.sample(spec.n_test, rng)
    test = {lang: [ciphers[lang].encipher(s) for s in pool] for lang in spec.languages}
    return SyntheticCorpus(spec, corpora, test, ciphers)
