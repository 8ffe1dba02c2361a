"""Multilingual unsupervised neural machine translation at desk scale.

A small numpy implementation of a shared-encoder/shared-decoder transformer
trained from monolingual text alone, with self and language-branch knowledge
distillation, plus the data, decoding and evaluation plumbing around it.
"""

__version__ = "0.1.0"
