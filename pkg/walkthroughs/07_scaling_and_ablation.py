"""
Data scaling and the embedding ablation
=======================================

Two experiment harnesses. The scaling run trains one model per data volume
with everything else fixed and reports heldout error; the ablation trains
with the action/time embeddings on and off and writes both to one CSV.
Sizes and steps are shrunk here; the acceptance run uses 1k/10k/100k chunks
and 3000 steps with the default model.
"""

import tempfile
from pathlib import Path

from action_codec.autoencoder import ModelConfig
from action_codec.data import SyntheticSpec, chunk_trajectories, compute_norm_stats, generate_synthetic, normalize
from action_codec.training import embedding_ablation, first_chunks, scaling_experiment, synthetic_pool

small = ModelConfig(k=16, channels=(16, 32))
out = Path(tempfile.mkdtemp())

rows = scaling_experiment([200, 2000, 20000], small, steps=600, batch_size=64, seed=0, csv_path=out / "scaling.csv")
for r in rows:
    print(f"{r.train_size:6d} chunks -> heldout mse {r.heldout_mse:.4f}, perplexity {r.perplexity:.1f}")
print((out / "scaling.csv").read_text())

# %%
# The ablation reports convergence via the single-chunk overfit oracle for
# each configuration, and makes no claim about which heldout number is lower.
train_side, _ = synthetic_pool(3000, 5, seed=4, spec=SyntheticSpec(count=1, mean_length=80, seed=4))
stats = compute_norm_stats(train_side)
train_chunks = normalize(first_chunks(train_side, 3000, 5), stats)
held = normalize(chunk_trajectories(generate_synthetic(SyntheticSpec(count=20, mean_length=80, seed=400)), 5, 5), stats)
embedding_ablation(train_chunks, held, small, steps=400, batch_size=64, csv_path=out / "ablation.csv")
print((out / "ablation.csv").read_text())
