"""Synthetic cipher languages and the shared subword vocabulary.

Run with ``python3 tutorials/01_synthetic_languages.py``.
"""

from munmt.data import SyntheticSpec, decode_ids, gen_synthetic_corpus, prepare_corpora

# A small base language and three ciphers of it.  c2 and c3 share a branch,
# so most of their word forms coincide; c1 sits in the pivot's branch.
spec = SyntheticSpec(n_words=60, n_sentences=500, n_test=20)
sc = gen_synthetic_corpus(spec)
print("languages:", sc.languages, "branches:", spec.branches)

# Training corpora are sampled independently per language: nothing is parallel.
for lang in sc.languages:
    print(f"{lang:>4}  {sc.corpora[lang][0]}")

# The test sets are parallel, and the ciphers give exact gold translations.
src = sc.test["base"][0]
for lang in sc.languages[1:]:
    print(f"base -> {lang}: {sc.gold_translate(src, 'base', lang)}")
assert sc.gold_translate(src, "base", "c2") == sc.test["c2"][0]

shared = sum(sc.ciphers["c2"].mapping[w] == sc.ciphers["c3"].mapping[w] for w in sc.ciphers["c2"].mapping)
print(f"c2 and c3 spell {shared} of {spec.n_words} words identically")

# One BPE model over all languages; each id sequence is framed by BOS/EOS.
enc = prepare_corpora(sc.corpora, vocab_size=300)
ids = enc.train["c1"][0]
print("vocabulary size:", len(enc.vocab))
print("c1 ids:", ids)
print("decoded:", decode_ids(ids, enc.vocab))
