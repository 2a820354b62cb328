"""
From trajectories to normalized chunks
======================================

Trajectories are JSONL records of ``(T, 7)`` actions: three position deltas,
three rotation deltas and a gripper command in [0, 1].
"""

import tempfile
from pathlib import Path

import numpy as np

from action_codec.data import (
    SyntheticSpec,
    chunk_trajectories,
    compute_norm_stats,
    denormalize,
    filter_noops,
    generate_synthetic,
    load_trajectories,
    mean_jerk,
    normalize,
    save_trajectories,
    split_heldout,
)

clean = generate_synthetic(SyntheticSpec(count=40, seed=0))
jittery = generate_synthetic(SyntheticSpec(count=40, seed=0, jitter_std=0.002))
print("trajectory lengths:", [len(t) for t in clean[:5]], "...")

# %%
# Jittery data is the same path plus per-step noise, which shows up as jerk.
print(f"mean jerk clean {np.mean([mean_jerk(t.actions) for t in clean]):.2e}, "
      f"jittery {np.mean([mean_jerk(t.actions) for t in jittery]):.2e}")

# %%
# Writing and reading JSONL preserves the data.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "clean.jsonl"
    save_trajectories(clean, path)
    back = load_trajectories(path)
    print("reloaded", len(back), "trajectories; first line starts",
          path.read_text()[:60] + "...")

# %%
# No-op steps (motion below the thresholds) are removed, including the
# near-still ends of each synthetic segment. Applying the filter twice
# changes nothing.
held = clean[0].actions.copy()
padded = np.vstack([held[:10], np.repeat(held[10:11], 6, axis=0), held[11:]])
t = type(clean[0])("padded", "sim", 20.0, padded)
once = filter_noops(t)
print(f"{len(t)} steps before filtering, {len(once)} after, {len(filter_noops(once))} after a second pass")

# %%
# The heldout split hashes trajectory ids, so it never depends on order.
train, heldout = split_heldout(clean + jittery)
print(len(train), "train trajectories,", len(heldout), "heldout")

# %%
# Percentile stats map [q01, q99] to [-1, 1] per dimension. Chunks are
# sliding windows of 5 consecutive actions.
stats = compute_norm_stats(train)
chunks = chunk_trajectories(train, 5, 1)
norm = normalize(chunks, stats)
print("chunk array:", chunks.shape)
print("fraction inside [-1, 1]:", np.mean(np.abs(norm) <= 1.0).round(4))
# Values beyond the percentiles are clipped, so the inverse recovers the
# clipped chunk.
print("denormalize inverts normalize:", np.allclose(denormalize(norm, stats), np.clip(chunks, stats.q01, stats.q99)))
