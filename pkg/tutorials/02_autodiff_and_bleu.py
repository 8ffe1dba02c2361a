"""The tape autodiff and the BLEU scorer, checked by hand.

Run with ``python3 tutorials/02_autodiff_and_bleu.py``.
"""

import numpy as np

from munmt import tensor as T
from munmt.evaluation import bleu

# Gradients are recorded on a tape and checked against central differences.
with T.default_dtype(np.float64):
    rng = np.random.default_rng(0)
    x = T.tensor(rng.normal(size=(3, 5)), requires_grad=True)
    w = T.tensor(rng.normal(size=(5, 4)), requires_grad=True)

    def loss():
        return T.cross_entropy(T.matmul(x, w), np.array([0, 3, 1]))

    print("worst relative error:", T.gradcheck(loss, [x, w]))

# Temperature-softened distributions and the KL used by distillation.
logits = T.tensor(np.array([[2.0, 1.0, 0.0]]))
print("T=1:", T.softmax_with_temperature(logits, 1.0).data.round(3))
print("T=2:", T.softmax_with_temperature(logits, 2.0).data.round(3))
p = T.softmax_with_temperature(logits, 2.0)
print("KL(p, p) =", float(T.kl_divergence(p, p).data))

# Corpus BLEU with clipped n-gram counts and a brevity penalty.
rep = bleu(["the cat sat on the mat ."], ["the cat sat on a mat ."])
print(rep)
print("matches", rep.matches, "totals", rep.totals)
print("by hand:", 100 * (6 / 7 * 4 / 6 * 2 / 5 * 1 / 4) ** 0.25)
