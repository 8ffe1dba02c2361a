"""Independent oracles shared by the unit tests and the acceptance suite."""

import math

import numpy as np

from munmt import tensor as T
from munmt.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=T.get_default_dtype()), requires_grad=True)


def brute_bleu(hyps, refs):
    """Slow reference scorer: explicit n-gram lists, clipping by list counts."""
    matches = [0, 0, 0, 0]
    totals = [0, 0, 0, 0]
    c = r = 0
    for h, ref in zip(hyps, refs):
        h, ref = h.split(), ref.split()
        c += len(h)
        r += len(ref)
        for n in range(1, 5):
            hg = [tuple(h[i:i + n]) for i in range(len(h) - n + 1)]
            rg = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
            for g in set(hg):
                matches[n - 1] += min(hg.count(g), rg.count(g))
            totals[n - 1] += len(hg)
    if c == 0 or 0 in matches or 0 in totals:
        return 0.0, matches, totals
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return 100 * bp * math.exp(sum(math.log(m / t) for m, t in zip(matches, totals)) / 4), matches, totals


def grad_cases(rng):
    def r(*shape):
        return leaf(rng.normal(size=shape))

    a, b = r(3, 4), r(3, 4)
    pos = leaf(rng.uniform(0.5, 2.0, size=(3, 4)))
    m1, m2 = r(2, 3, 4), r(4, 5)
    x, w, bias = r(2, 3, 4), r(4, 5), r(5)
    emb = r(6, 4)
    g, be = r(4), r(4)
    q, k, v = r(2, 2, 3, 4), r(2, 2, 5, 4), r(2, 2, 5, 4)
    attn_bias = np.where(rng.random((2, 1, 1, 5)) < 0.3, -1e9, 0.0)
    attn_bias[..., 0] = 0.0
    logits = r(5, 6)
    targets = rng.integers(0, 6, 5)
    mask = np.array([1, 1, 0, 1, 1], dtype=bool)
    pq = leaf(rng.dirichlet(np.ones(6), size=4))
    qq = T.tensor(rng.dirichlet(np.ones(6), size=4))
    wsum = T.tensor(rng.normal(size=(3, 4)))
    return {
        "add": (lambda: T.sum(T.add(a, b) * wsum), [a, b]),
        "sub": (lambda: T.sum(T.sub(a, b) * wsum), [a, b]),
        "mul": (lambda: T.sum(T.mul(a, b)), [a, b]),
        "div": (lambda: T.sum(T.div(a, pos)), [a, pos]),
        "neg": (lambda: T.sum(T.neg(a) * wsum), [a]),
        "exp": (lambda: T.sum(T.exp(a)), [a]),
        "log": (lambda: T.sum(T.log(pos)), [pos]),
        "tanh": (lambda: T.sum(T.tanh(a) * wsum), [a]),
        "gelu": (lambda: T.sum(T.gelu(a) * wsum), [a]),
        "relu": (lambda: T.sum(T.relu(a + 0.05) * wsum), [a]),
        "mean": (lambda: T.mean(T.mul(a, a), axis=1).sum(), [a]),
        "reshape_transpose": (lambda: T.sum(T.transpose(T.reshape(a, (4, 3))) * wsum), [a]),
        "matmul": (lambda: T.sum(T.tanh(T.matmul(m1, m2))), [m1, m2]),
        "linear": (lambda: T.sum(T.tanh(T.linear(x, w, bias))), [x, w, bias]),
        "embedding": (lambda: T.sum(T.tanh(T.embedding(emb, np.array([[0, 2, 2], [5, 1, 0]])))), [emb]),
        "layer_norm": (lambda: T.sum(T.tanh(T.layer_norm(a, g, be))), [a, g, be]),
        "softmax": (lambda: T.sum(T.softmax(a) * wsum), [a]),
        "log_softmax": (lambda: T.sum(T.log_softmax(a) * wsum), [a]),
        "softmax_T": (lambda: T.sum(T.softmax_with_temperature(a, 2.0) * wsum), [a]),
        "attention": (lambda: T.sum(T.tanh(T.attention(q, k, v, attn_bias))), [q, k, v]),
        "cross_entropy": (lambda: T.cross_entropy(logits, targets, mask), [logits]),
        "kl_divergence": (lambda: T.kl_divergence(pq, qq), [pq]),
    }


def full_model_case(seed=9, vocab_size=24):
    """Teacher-forced loss of a desk-size encoder-decoder and its parameter list."""
    from munmt.data import BOS, EOS, PAD, Batch
    from munmt.model import TransformerConfig, decode_teacher_forced, encode, init_unmt

    cfg = TransformerConfig.desk(vocab_size=vocab_size, n_languages=2, max_len=8)
    p = init_unmt(cfg, np.random.default_rng(seed))
    src = Batch.from_sequences([[BOS, 5, 6, 7, EOS], [BOS, 8, EOS]], [0, 1])
    tgt = np.array([[BOS, 9, 10, 11, EOS], [BOS, 12, EOS, PAD, PAD]])

    def f():
        logits = decode_teacher_forced(encode(src, p), src.tokens, tgt[:, :-1], [1, 0], p)
        return T.cross_entropy(logits, tgt[:, 1:], tgt[:, 1:] != PAD)

    return f, list(p.tensors.values())
