"""
Residual vector quantization
============================

Each layer quantizes what the previous layers left over, so the sum of the
picked codes approaches the input as layers are added.
"""

import numpy as np

from action_codec import rvq
from action_codec.codec import layer_range, offset_tokens

rng = np.random.default_rng(0)
k = 16
x = rng.normal(size=(2000, k))

# Codebooks with shrinking scales, one per layer, 256 codes each.
books = rvq.RvqCodebooks([rvq.Codebook(rng.normal(size=(256, k)) * 0.6**i) for i in range(7)])

for nq in (1, 3, 7):
    sub = rvq.RvqCodebooks(books.layers[:nq])
    res = rvq.quantize_residual(x, sub)
    err = np.mean((x - res.quantized) ** 2)
    print(f"{nq} layers: mean squared error {err:.4f}")

# %%
# The recurrence telescopes: input = picked codes + final residual, exactly
# up to rounding.
res = rvq.quantize_residual(x, books)
gap = np.abs(x - rvq.lookup(res.indices, books) - res.residuals[:, -1]).max()
print("telescoping gap:", gap)

# %%
# Tokens shift each layer's index by 256 so layers never share an id.
print("raw indices   ", res.indices[0])
print("offset tokens ", offset_tokens(res.indices[0]))
print("layer 2 range ", layer_range(2))

# %%
# Utilization and perplexity summarize how evenly codes are used. Random
# codebooks on Gaussian data are far from uniform.
for i, u in enumerate(rvq.utilization_from_indices(res.indices)[:3]):
    print(f"layer {i}: {u}")
