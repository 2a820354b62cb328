"""
Tokens: VQ chunks versus per-step bins
======================================

A 5-step chunk of 7-D actions costs 7 VQ tokens (one per quantizer layer)
or 35 bin tokens (one per scalar). Both schemes can be remapped into the
tail of a language-model vocabulary.
"""

import numpy as np

from action_codec import codec
from action_codec.autoencoder import ActionVQVAE, ModelConfig
from action_codec.data import SyntheticSpec, chunk_trajectories, compute_norm_stats, generate_synthetic, normalize
from action_codec.training import Trainer, checkpoint_from_model

trajs = generate_synthetic(SyntheticSpec(count=40, mean_length=80, seed=3))
stats = compute_norm_stats(trajs)
chunks = chunk_trajectories(trajs, 5, 1)

model = ActionVQVAE(ModelConfig(k=16, channels=(16, 32)), seed=0)
Trainer(model, lr=1e-3, seed=0).fit(normalize(chunks, stats), 400, 64)
ckpt = checkpoint_from_model(model, stats, step=400)

# %%
# One chunk through each scheme.
chunk = chunks[100]
vq = codec.vq_encode(chunk, ckpt)
bins = codec.bin_encode(chunk, stats)
print("vq tokens :", vq.tokens)
print("bin tokens:", len(bins.tokens), "values, first row", bins.tokens[:7])

vq_err = np.mean((normalize(codec.vq_decode(vq, ckpt), stats) - normalize(chunk, stats)) ** 2)
bin_err = np.mean((normalize(codec.bin_decode(bins, stats), stats) - normalize(chunk, stats)) ** 2)
print(f"normalized mse: vq {vq_err:.2e}, bins {bin_err:.2e}")

# %%
# Binning error is bounded by half a bin width per dimension.
width = (stats.q99 - stats.q01) / 256
print("max |error| / half bin width:",
      float((np.abs(codec.bin_decode(bins, stats) - np.clip(chunk, stats.q01, stats.q99)) / (width / 2)).max()))

# %%
# Decoding checks layer ranges: token 256 belongs to layer 1, not layer 0.
try:
    codec.check_vq_ranges([256] + list(vq.tokens[1:]), 7)
except codec.TokenRangeError as err:
    print("rejected:", err)

# %%
# Vocabulary remap for a 32000-token language model.
vocab = codec.VocabMap.for_vq(32000, 7)
ids = [codec.remap_to_vocab(t, vocab) for t in vq.tokens]
print("vocab ids:", ids)
print("round trip:", [codec.remap_from_vocab(i, vocab) for i in ids] == list(vq.tokens))
print("tokens per 5 actions:", codec.tokens_per_action_ratio())
