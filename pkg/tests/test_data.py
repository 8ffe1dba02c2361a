import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from munmt.data import (BOS, EOS, MASK, PAD, UNK, Batch, BpeModel, Cipher, LanguageBranchMap, NoiseConfig,
                        SyntheticCorpus, SyntheticSpec, SyntheticSpecError, Vocabulary, VocabError, add_noise,
                        check_framing, clean_corpus, decode_ids, encode_sentence, gen_synthetic_corpus, learn_bpe,
                        make_batches, mask_for_mlm, pretokenize)
from munmt.data.synthetic import check_bijective

GOLDEN = json.loads((Path(__file__).parent / "golden" / "data.json").read_text())


# -- cleaning


def test_clean_corpus_word_limit_boundary():
    fifty = " ".join(["w"] * 50)
    fifty_one = " ".join(["w"] * 51)
    assert list(clean_corpus([fifty, fifty_one])) == [fifty]
    assert list(clean_corpus([])) == []


def test_clean_corpus_drops_blank_and_counts_bad_utf8():
    counters = Counter()
    out = list(clean_corpus(["a b", "", "   ", b"\xff\xfe bad", "c"], counters=counters))
    assert out == ["a b", "c"]
    assert counters["invalid_utf8"] == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.text(alphabet="ab \n", max_size=30), max_size=20))
def test_clean_corpus_idempotent_and_ordered(lines):
    lines = [s.replace("\n", " ") for s in lines]
    once = list(clean_corpus(lines, max_words=4))
    assert list(clean_corpus(once, max_words=4)) == once
    it = iter(lines)
    assert all(any(x == y for y in it) for x in once)


# -- BPE


def test_first_merge_is_most_frequent_pair():
    bpe, vocab = learn_bpe([["aaab aaab"]], vocab_size=5 + 3 + 1)
    assert bpe.merges[0] == ("a", "a")


def test_zero_merge_budget_gives_characters():
    corpus = [["ab ba"]]
    # characters with and without the end-of-word marker: a, b, a</w>, b</w>
    bpe, vocab = learn_bpe(corpus, vocab_size=5 + 4)
    assert bpe.merges == []
    assert len(vocab) == 9


def test_budget_too_small_is_an_error():
    with pytest.raises(VocabError):
        learn_bpe([["abc"]], vocab_size=6)


def test_bpe_deterministic():
    corpus = {"x": ["the cat sat", "the mat"], "y": ["a cat", "that hat"]}
    a, va = learn_bpe(corpus, 30)
    b, vb = learn_bpe(corpus, 30)
    assert a.merges == b.merges and va == vb
    assert len(set(a.merges)) == len(a.merges)


def test_bpe_rejects_duplicate_merges():
    with pytest.raises(VocabError):
        BpeModel([("a", "b"), ("a", "b")], 10)


def test_specials_and_vocab_bijection():
    _, vocab = learn_bpe([["hello world"]], 40)
    assert [vocab.id(t) for t in vocab.itos[:5]] == [PAD, UNK, BOS, EOS, MASK]
    assert all(vocab.id(vocab.token(i)) == i for i in range(len(vocab)))


def test_encode_empty_and_unknown():
    bpe, vocab = learn_bpe([["ab ab ba"]], 20)
    assert encode_sentence("", bpe, vocab) == [BOS, EOS]
    assert UNK in encode_sentence("xyz", bpe, vocab)


def test_round_trip_on_synthetic_corpus():
    sc = gen_synthetic_corpus(SyntheticSpec(n_sentences=300, n_test=10, n_words=60))
    bpe, vocab = learn_bpe(sc.corpora, 400)
    for lang in sc.languages:
        for s in sc.corpora[lang][:50]:
            assert decode_ids(encode_sentence(s, bpe, vocab), vocab) == " ".join(pretokenize(s))


def test_bpe_and_vocab_files_round_trip(tmp_path):
    bpe, vocab = learn_bpe([["low lower lowest", "new newer"]], 30)
    bpe.save(tmp_path / "merges.txt")
    vocab.save(tmp_path / "vocab.tsv")
    assert BpeModel.load(tmp_path / "merges.txt").merges == bpe.merges
    assert Vocabulary.load(tmp_path / "vocab.tsv") == vocab
    first = (tmp_path / "merges.txt").read_text().splitlines()[0]
    assert first == " ".join(bpe.merges[0])


# -- batching


def _seqs(lengths):
    return [[BOS] + [10] * (n - 2) + [EOS] for n in lengths]


def test_make_batches_examples():
    assert len(make_batches(_seqs([10, 10, 10]), 0, 2000)) == 1
    assert len(make_batches(_seqs([10, 10]), 0, 10)) == 2


def test_make_batches_truncates_with_counter():
    counters = Counter()
    batches = make_batches(_seqs([30]), 0, 10, counters)
    assert counters["truncated"] == 1
    assert batches[0].n_tokens == 10 and check_framing(batches[0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(2, 40), min_size=1, max_size=60), st.integers(40, 300))
def test_make_batches_conserves_tokens(lengths, budget):
    seqs = [[BOS] + list(range(5, 5 + n - 2)) + [EOS] for n in lengths]
    batches = make_batches(seqs, 1, budget)
    assert sum(b.n_tokens for b in batches) == sum(lengths)
    assert all(b.n_tokens <= budget and check_framing(b) for b in batches)
    seen = sorted(tuple(s) for b in batches for s in b.sequences())
    assert seen == sorted(tuple(s) for s in seqs)


def test_batch_pad_mask_and_languages():
    b = Batch.from_sequences([[BOS, 7, EOS], [BOS, EOS]], [1, 2])
    assert b.tokens.tolist() == [[BOS, 7, EOS], [BOS, EOS, PAD]]
    assert b.pad_mask.tolist() == [[True, True, True], [True, True, False]]
    assert b.langs.tolist() == [1, 2]


# -- noise


def test_noise_identity_at_zero():
    ids = [BOS, 5, 6, 7, 8, EOS]
    assert add_noise(ids, NoiseConfig(0.0, 0), np.random.default_rng(0)) == ids


def test_noise_full_drop_keeps_one():
    out = add_noise([BOS, 5, 6, 7, 8, 9, EOS], NoiseConfig(1.0, 3), np.random.default_rng(0))
    assert len(out) == 3 and out[0] == BOS and out[-1] == EOS and out[1] in range(5, 10)


def test_noise_config_bounds():
    with pytest.raises(ValueError):
        NoiseConfig(-0.1, 1)
    with pytest.raises(ValueError):
        NoiseConfig(0.1, -1)


def test_noise_golden():
    rng = np.random.default_rng(1234)
    ids = [BOS] + list(range(10, 22)) + [EOS]
    assert [add_noise(ids, NoiseConfig(), rng) for _ in range(3)] == GOLDEN["noise"]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.floats(0, 0.9), st.integers(0, 5), st.integers(0, 2**31))
def test_noise_bounds_displacement(n, p, k, seed):
    ids = [BOS] + list(range(100, 100 + n)) + [EOS]
    out = add_noise(ids, NoiseConfig(p, k), np.random.default_rng(seed))
    assert out[0] == BOS and out[-1] == EOS
    assert 3 <= len(out) <= len(ids)
    interior = out[1:-1]
    assert len(set(interior)) == len(interior)
    # relative order among survivors: a token's rank moves at most k places
    survivors = sorted(interior)
    for new_pos, tok in enumerate(interior):
        assert abs(survivors.index(tok) - new_pos) <= k


# -- MLM masking


def test_mask_rate_zero_is_identity():
    ids = np.array([BOS, 7, 8, EOS])
    out, pos = mask_for_mlm(ids, 0.0, np.random.default_rng(0))
    assert out.tolist() == ids.tolist() and pos.size == 0


def test_mask_selection_frequency():
    ids = np.full(100_002, 9)
    ids[0], ids[-1] = BOS, EOS
    _, pos = mask_for_mlm(ids, 0.15, np.random.default_rng(0), vocab_size=50)
    assert abs(pos.size / 100_000 - 0.15) < 0.01


def test_mask_split_80_10_10():
    ids = np.full(200_000, 9)
    out, pos = mask_for_mlm(ids, 0.5, np.random.default_rng(1), vocab_size=1000)
    picked = out[pos]
    assert abs((picked == MASK).mean() - 0.8) < 0.01
    assert abs((picked == 9).mean() - 0.1) < 0.01


def test_mask_never_touches_specials():
    ids = np.array([[BOS, 7, 8, EOS, PAD], [BOS, 9, EOS, PAD, PAD]])
    for seed in range(20):
        out, pos = mask_for_mlm(ids, 0.9, np.random.default_rng(seed), vocab_size=20)
        assert set(ids.reshape(-1)[pos].tolist()) <= {7, 8, 9}
        assert (out[ids < 5] == ids[ids < 5]).all()


def test_mask_golden():
    ids = [BOS] + list(range(10, 22)) + [EOS]
    m, pos = mask_for_mlm(np.array([ids, ids]), 0.3, np.random.default_rng(1234), vocab_size=50)
    assert m.tolist() == GOLDEN["mlm_masked"] and pos.tolist() == GOLDEN["mlm_positions"]


# -- languages


def test_default_branch_table_matches_taxonomy():
    m = LanguageBranchMap()
    assert len(m.languages) == 13
    assert len(m.branches()) == 6 and len(m.families()) == 3
    assert sorted(m.branches()["Romance"]) == ["es", "fr", "it", "ro"]
    assert m.branch("en") == m.branch("de") == "Germanic"
    members = [lang for langs in m.branches().values() for lang in langs]
    assert sorted(members) == sorted(m.languages)


# -- synthetic languages


def test_non_bijective_substitution_rejected():
    with pytest.raises(SyntheticSpecError):
        check_bijective({"a": "x", "b": "x"})
    with pytest.raises(SyntheticSpecError):
        Cipher({"a": "x", "b": "x"})


def test_gold_cipher_reproduces_references():
    sc = gen_synthetic_corpus(SyntheticSpec(n_sentences=100, n_test=30))
    for src in sc.languages:
        for tgt in sc.languages:
            srcs, refs = sc.test_pair(src, tgt)
            assert [sc.gold_translate(s, src, tgt) for s in srcs] == refs


def test_identity_languages_make_a_copy_task():
    spec = SyntheticSpec(languages=["a", "b"], branches={"a": "X", "b": "X"}, anchor_rate=1.0,
                         n_sentences=50, n_test=20)
    sc = gen_synthetic_corpus(spec)
    assert sc.test["a"] == sc.test["b"]


def test_reordering_rule_round_trips():
    spec = SyntheticSpec(reorder={"c2": "swap_pairs"}, n_sentences=50, n_test=20)
    sc = gen_synthetic_corpus(spec)
    assert not sc.ciphers["c2"].substitution_only
    for s in sc.test["base"]:
        assert sc.ciphers["c2"].decipher(sc.ciphers["c2"].encipher(s)) == s
    with pytest.raises(SyntheticSpecError):
        SyntheticSpec(reorder={"c1": "reverse"}).validate()


def test_default_spec_shape_and_golden():
    spec = SyntheticSpec()
    assert len(spec.languages) == 4 and len(set(spec.branches.values())) == 2
    assert spec.n_words == 200 and spec.n_sentences == 20000
    sc = gen_synthetic_corpus(spec)
    assert all(len(sc.corpora[lang]) == 20000 for lang in sc.languages)
    assert {lang: sc.corpora[lang][0] for lang in sc.languages} == GOLDEN["synthetic_first"]
    assert sc.fingerprint() == GOLDEN["synthetic_fingerprint"]


def test_corpus_scale_starves_one_language():
    sc = gen_synthetic_corpus(SyntheticSpec(n_sentences=400, n_test=5, corpus_scale={"c3": 0.05}))
    assert len(sc.corpora["c3"]) == 20 and len(sc.corpora["c1"]) == 400


def test_synthetic_save_load_round_trip(tmp_path):
    sc = gen_synthetic_corpus(SyntheticSpec(n_sentences=60, n_test=10))
    sc.save(tmp_path)
    back = SyntheticCorpus.load(tmp_path)
    assert back.fingerprint() == sc.fingerprint()
    assert back.ciphers["c2"].mapping == sc.ciphers["c2"].mapping


def test_spec_file_round_trip(tmp_path):
    spec = SyntheticSpec(n_words=50, reorder={"c3": "swap_pairs"}, corpus_scale={"c1": 0.5})
    (tmp_path / "s.cfg").write_text(spec.to_text())
    assert SyntheticSpec.from_file(tmp_path / "s.cfg") == spec


def test_generator_full_bigram_weight_gives_fixed_successors():
    sc = gen_synthetic_corpus(SyntheticSpec(n_words=40, successors=1, bigram_weight=1.0, n_sentences=300, n_test=5))
    follow = {}
    for line in sc.corpora["base"]:
        w = line.split()
        for a, b in zip(w, w[1:]):
            assert follow.setdefault(a, b) == b


def test_generator_zero_bigram_weight_is_zipfian():
    n = 50
    sc = gen_synthetic_corpus(SyntheticSpec(n_words=n, bigram_weight=0.0, n_sentences=4000, n_test=5))
    counts = Counter(w for line in sc.corpora["base"] for w in line.split())
    total = sum(counts.values())
    top = counts.most_common(1)[0][1] / total
    harmonic = sum(1 / k for k in range(1, n + 1))
    assert top == pytest.approx(1 / harmonic, rel=0.05)
    with pytest.raises(SyntheticSpecError):
        SyntheticSpec(bigram_weight=1.5).validate()
    with pytest.raises(SyntheticSpecError):
        SyntheticSpec(successors=0).validate()
