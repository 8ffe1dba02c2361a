from .batching import Batch, check_framing, make_batches
from .bpe import (BOS, EOS, MASK, N_SPECIAL, PAD, SPECIALS, UNK, BpeModel, Vocabulary, VocabError,
                  decode_ids, encode_sentence, learn_bpe)
from .corpus import clean_corpus, pretokenize, read_lines, write_lines
from .languages import DEFAULT_BRANCHES, LanguageBranchMap
from .noise import NoiseConfig, add_noise, mask_for_mlm
from .prepare import EncodedCorpora, prepare_corpora
from .synthetic import (Cipher, SyntheticCorpus, SyntheticSpec, SyntheticSpecError, check_bijective,
                        gen_synthetic_corpus)
