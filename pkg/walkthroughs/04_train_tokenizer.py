"""
Training a chunk tokenizer
==========================

The tokenizer is a temporal convolutional autoencoder with a 7-layer residual
quantizer in the middle. Training runs a staged schedule: first jittery
"real-style" data, then a mix that adds clean synthetic trajectories.
"""

import tempfile
from pathlib import Path

from action_codec.autoencoder import ModelConfig
from action_codec.data import DatasetEntry, DatasetManifest, SyntheticSpec, generate_synthetic
from action_codec.training import Stage, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

real = generate_synthetic(SyntheticSpec(count=60, seed=1, jitter_std=0.002, source_tag="real", id_prefix="r"))
synth = generate_synthetic(SyntheticSpec(count=60, seed=2, id_prefix="s"))

real_only = DatasetManifest([DatasetEntry("real", "real", 1.0, trajectories=real)])
mixed = DatasetManifest([
    DatasetEntry("real", "real", 1.0, trajectories=real),
    DatasetEntry("synthetic", "synthetic-clean", 1.0, trajectories=synth),
])

# %%
# A small model keeps this walkthrough to about a minute. The defaults
# (k=64, channels 32/64/128) are what the acceptance runs use.
model = ModelConfig(k=16, channels=(16, 32))
config = TrainConfig(
    steps=600,
    batch_size=64,
    lr=1e-3,
    seed=0,
    schedule=[Stage(real_only, 300), Stage(mixed, 300)],
)


def progress(step, losses):
    if step % 150 == 0:
        print(f"step {step}: total {losses.total:.4f}, reconstruction {losses.rec:.4f}")


ckpt = train(config, model, on_step=progress)

# %%
# Evaluation uses only the heldout side of the id-hash split and reports
# reconstruction error per source tag, code usage per layer and the jerk of
# reconstructions.
report = evaluate(ckpt, real + synth)
print("heldout mse per tag:", {k: round(v, 5) for k, v in report.mse.items()})
print("perplexity per layer:", [round(p, 1) for p in report.perplexity])
print(f"jerk original {report.jerk_original:.2e}, reconstructed {report.jerk_reconstructed:.2e}")

# %%
# Checkpoints are a single self-checking binary file.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "tok.avq"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    print(f"{path.stat().st_size} bytes, hash {back.hash}, bit-equal after reload: {back.bit_equal(ckpt)}")
