import numpy as np

from peftlab.model import BOS_ID, EOS_ID, PAD_ID, ModelConfig

TINY = dict(enc_layers=1, dec_layers=2, d_model=16, heads=2, ffn_dim=24, vocab_size=20, max_positions=32, dropout=0.0)


def tiny_config(**kw) -> ModelConfig:
    return ModelConfig(**{**TINY, **kw})


def random_batch(rng, batch=3, src_len=5, tgt_len=4, vocab=20):
    """Padded source ids and BOS ... EOS target ids with ragged lengths."""
    src = np.full((batch, src_len), PAD_ID, dtype=np.int64)
    tgt = np.full((batch, tgt_len + 2), PAD_ID, dtype=np.int64)
    for i in range(batch):
        ls = int(rng.integers(1, src_len + 1))
        lt = int(rng.integers(1, tgt_len + 1))
        src[i, :ls] = rng.integers(4, vocab, size=ls)
        tgt[i, 0] = BOS_ID
        tgt[i, 1:lt + 1] = rng.integers(4, vocab, size=lt)
        tgt[i, lt + 1] = EOS_ID
    return src, tgt
