"""Corpus -> shared vocabulary -> id sequences."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .bpe import BpeModel, Vocabulary, encode_sentence, learn_bpe
from .corpus import clean_corpus


@dataclass
class EncodedCorpora:
    bpe: BpeModel
    vocab: Vocabulary
    train: dict[str, list[list[int]]]
    counters: Counter = field(default_factory=Counter)

    @property
    def languages(self) -> list[str]:
        return list(self.train)

    def encode(self, lines, lang: str | None = None) -> list[list[int]]:
        return [encode_sentence(s, self.bpe, self.vocab, lang) for s in lines]


def prepare_corpora(corpora: dict[str, list[str]], vocab_size: int, max_words: int = 50) -> EncodedCorpora:
    """Clean every corpus, learn one BPE model over all of them and encode."""
    counters: Counter = Counter()
    cleaned = {lang: list(clean_corpus(lines, max_words, counters)) for lang, lines in corpora.items()}
    bpe, vocab = learn_bpe(cleaned, vocab_size)
    train = {lang: [encode_sentence(s, bpe, vocab, lang) for s in lines] for lang, lines in cleaned.items()}
    return EncodedCorpora(bpe, vocab, train, counters)
