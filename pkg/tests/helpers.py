import numpy as np

from prunelab.model import ModelConfig, build_model
from prunelab.tokenizer import make_batches

TINY = dict(vocab_size=40, embed_dim=16, num_blocks=1, num_heads=2, head_dim=8, ffn_dim=32, max_seq_len=16)


def tiny_model(seed=0, **kw):
    return build_model(ModelConfig(**{**TINY, **kw, "seed": seed}))


def toy_utterances(n=50, seed=0, vocab=40, lo=3, hi=9):
    """Utterances from a small repeating grammar so a tiny model can learn something."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        start = int(rng.integers(4, vocab))
        length = int(rng.integers(lo, hi))
        out.append([4 + (start - 4 + k * 3) % (vocab - 4) for k in range(length)])
    return out


def toy_batch(seed=0, batch_size=4, seq_len=12, vocab=40):
    return make_batches(toy_utterances(16, seed, vocab), batch_size, seq_len, seed)[0]
