"""A miniature version of the whole pipeline.

Pretrain an encoder, train branch teachers, then train the multilingual model
with each distillation mode and compare BLEU.  The model and budgets are tiny
so the script finishes in about a minute; the scores only show that the
plumbing works.  The acceptance suite runs the desk-size experiment.

Run with ``python3 tutorials/03_train_and_distill.py``.
"""

from munmt.data import LanguageBranchMap, SyntheticSpec, gen_synthetic_corpus, prepare_corpora
from munmt.evaluation import ReportStore, compare_runs, evaluate_direction, zero_shot_matrix
from munmt.trainer import (TrainConfig, branch_languages, pretrain_mlm, train_lbunmt, train_munmt,
                           trained_directions)

spec = SyntheticSpec(n_words=40, n_sentences=400, n_test=30, max_len=7)
sc = gen_synthetic_corpus(spec)
langs = sc.languages
enc = prepare_corpora(sc.corpora, vocab_size=200)
ids = {lang: i for i, lang in enumerate(langs)}
bm = LanguageBranchMap.from_branches(spec.branches)


def cfg(**kw):
    return TrainConfig.for_profile("desk", vocab_size=200, d_model=32, d_ff=64, token_budget=150, lm_steps=300,
                                   **kw)


lm, manifest = pretrain_mlm(enc.train, cfg(languages=langs), len(enc.vocab), ids)
print("MLM loss, first and last step:", manifest.values("mlm")[0], manifest.values("mlm")[-1])

# One frozen teacher per branch; each also sees the pivot so it can translate to and from it.
teachers = {}
for branch in ("A", "B"):
    members = branch_languages(langs, bm, branch)
    teachers[branch], _ = train_lbunmt(enc.train, lm, 150, cfg(languages=members), members, bm, ids)
    print("teacher", branch, "covers", members)

store = ReportStore()
for mode in ("none", "skd", "lbkd"):
    params, man = train_munmt(enc.train, lm, 150, cfg(languages=langs, kd_mode=mode), teachers, langs, ids, bm)
    print(f"{mode}: {man.count()} loss records, {man.count(1)} per step")
    for s, t in trained_directions(langs):
        evaluate_direction(params, sc.test_pair(s, t), s, t, codec=enc, lang_ids=ids, store=store, run_id=mode)
    if mode == "skd":
        print(zero_shot_matrix(params, sc.test, langs[1:], codec=enc, lang_ids=ids).to_text())

runs = {run: {(s, t): store.get(run, s, t).score for s, t in trained_directions(langs)} for run in store.runs()}
print(compare_runs(runs).to_text())
