"""Shared byte-pair-encoding vocabulary.

Words are split into characters with an end-of-word marker glued to the final
character (``"cat"`` -> ``c a t</w>``).  Merges are learned over the
concatenation of every language's corpus.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import pretokenize

EOW = "</w>"
PAD, UNK, BOS, EOS, MASK = 0, 1, 2, 3, 4
SPECIALS = ("<pad>", "<unk>", "<s>", "</s>", "<mask>")
N_SPECIAL = len(SPECIALS)


class VocabError(ValueError):
    pass


def _split_word(word: str) -> tuple[str, ...]:
    if not word:
        return ()
    return tuple(word[:-1]) + (word[-1] + EOW,)


@dataclass
class BpeModel:
    merges: list[tuple[str, str]]
    vocab_size: int = 0
    _ranks: dict = field(default=None, repr=False, compare=False)
    _cache: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise VocabError("duplicate pair in merge list")
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._cache = {}

    def segment_word(self, word: str) -> list[str]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = list(_split_word(word))
        ranks = self._ranks
        while len(symbols) > 1:
            best = None
            best_rank = None
            for i in range(len(symbols) - 1):
                r = ranks.get((symbols[i], symbols[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank, best = r, (symbols[i], symbols[i + 1])
            if best is None:
                break
            merged = best[0] + best[1]
            out = []
            i = 0
            while i < len(symbols):
                if i < len(symbols) - 1 and symbols[i] == best[0] and symbols[i + 1] == best[1]:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            symbols = out
        self._cache[word] = symbols
        return symbols

    def segment(self, words: Sequence[str]) -> list[str]:
        out: list[str] = []
        for w in words:
            out.extend(self.segment_word(w))
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for a, b in self.merges:
                fh.write(f"{a} {b}\n")

    @classmethod
    def load(cls, path) -> "BpeModel":
        merges = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            a, b = line.split(" ")
            merges.append((a, b))
        return cls(merges)


class Vocabulary:
    """Token <-> id bijection with fixed special ids and a language table."""

    def __init__(self, tokens: Sequence[str], freqs: Sequence[int] | None = None, languages: Sequence[str] = ()):
        tokens = list(tokens)
        if tuple(tokens[:N_SPECIAL]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
            if freqs is not None:
                freqs = [0] * N_SPECIAL + list(freqs)
        if len(set(tokens)) != len(tokens):
            raise VocabError("duplicate token in vocabulary")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        self.freqs = list(freqs) if freqs is not None else [0] * len(tokens)
        self.languages = list(languages)
        self.lang2id = {lang: i for i, lang in enumerate(self.languages)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos and self.languages == other.languages

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def lang_id(self, lang: str) -> int:
        try:
            return self.lang2id[lang]
        except KeyError:
            raise VocabError(f"unknown language {lang!r}; known: {self.languages}") from None

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok, f in zip(self.itos, self.freqs):
                fh.write(f"{tok}\t{f}\n")

    @classmethod
    def load(cls, path, languages: Sequence[str] = ()) -> "Vocabulary":
        tokens, freqs = [], []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            tok, f = line.rsplit("\t", 1)
            tokens.append(tok)
            freqs.append(int(f))
        return cls(tokens, freqs, languages)


def _word_counts(corpora: Iterable[Iterable[str]]) -> Counter:
    counts: Counter = Counter()
    for lines in corpora:
        for line in lines:
            counts.update(pretokenize(line))
    return counts


def learn_bpe(corpora: dict[str, Iterable[str]] | Sequence[Iterable[str]], vocab_size: int) -> tuple[BpeModel, Vocabulary]:
    """Learn merges until the vocabulary (specials included) has ``vocab_size``
    entries or no adjacent pair is left.

    The most frequent pair wins; ties go to the lexicographically smallest pair.
    """
    if isinstance(corpora, dict):
        languages = list(corpora)
        streams = list(corpora.values())
    else:
        languages = []
        streams = list(corpora)
    if not streams:
        raise VocabError("learn_bpe needs at least one corpus")
    counts = _word_counts(streams)
    words = {w: list(_split_word(w)) for w in counts}
    base = sorted({s for syms in words.values() for s in syms})
    budget = vocab_size - N_SPECIAL - len(base)
    if budget < 0:
        raise VocabError(f"vocab_size {vocab_size} is below the {N_SPECIAL} specials + {len(base)} base symbols")

    merges: list[tuple[str, str]] = []
    # pair -> count, pair -> set of words containing it
    pair_counts: Counter = Counter()
    where: dict[tuple[str, str], set] = {}
    for w, syms in words.items():
        c = counts[w]
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += c
            where.setdefault(pair, set()).add(w)

    while len(merges) < budget:
        live = [(c, p) for p, c in pair_counts.items() if c > 0]
        if not live:
            break
        top = max(c for c, _ in live)
        best = min(p for c, p in live if c == top)
        merges.append(best)
        merged = best[0] + best[1]
        for w in list(where.get(best, ())):
            syms = words[w]
            c = counts[w]
            for pair in zip(syms, syms[1:]):
                pair_counts[pair] -= c
                s = where.get(pair)
                if s is not None:
                    s.discard(w)
            out = []
            i = 0
            while i < len(syms):
                if i < len(syms) - 1 and syms[i] == best[0] and syms[i + 1] == best[1]:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            words[w] = out
            for pair in zip(out, out[1:]):
                pair_counts[pair] += c
                where.setdefault(pair, set()).add(w)
        pair_counts.pop(best, None)
        where.pop(best, None)

    bpe = BpeModel(merges, vocab_size)
    tokens = base + [a + b for a, b in merges]
    # a merged symbol can coincide with a base symbol only if it was already present
    seen = set()
    ordered = []
    for t in tokens:
        if t not in seen:
            seen.add(t)
            ordered.append(t)
    freq = Counter()
    for w, syms in words.items():
        for s in syms:
            freq[s] += counts[w]
    vocab = Vocabulary(list(SPECIALS) + ordered, [0] * N_SPECIAL + [freq[t] for t in ordered], languages)
    return bpe, vocab


def encode_sentence(text: str, bpe: BpeModel, vocab: Vocabulary, lang: str | None = None) -> list[int]:
    """Pretokenize, segment and map to ids, framed as ``BOS ... EOS``.

    ``lang`` is accepted for interface symmetry; the vocabulary is shared so it
    does not change the ids.
    """
    ids = [BOS]
    ids.extend(vocab.id(s) for s in bpe.segment(pretokenize(text)))
    ids.append(EOS)
    return ids


def decode_ids(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Inverse of :func:`encode_sentence` up to pretokenization.

    Specials other than UNK are dropped; UNK renders as ``<unk>``.
    """
    parts: list[str] = []
    for i in ids:
        i = int(i)
        if i in (PAD, BOS, EOS, MASK):
            if i == EOS:
                break
            continue
        parts.append(vocab.token(i) if i != UNK else "<unk>" + EOW)
    text = "".join(parts).replace(EOW, " ")
    return " ".join(text.split())
