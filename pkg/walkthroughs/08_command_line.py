"""
The command line, end to end
============================

Every capability is also reachable through the ``action-codec`` command.
This script drives it in-process (``main`` takes an argv list and returns an
exit code) inside a scratch directory.
"""

import json
import os
import tempfile

from action_codec.cli import main

os.chdir(tempfile.mkdtemp())


def run(*argv):
    print("$ action-codec", " ".join(argv))
    code = main(list(argv))
    print("exit", code)
    return code


# %%
# Synthetic data in the JSONL trajectory format.
run("gen-data", "--count", "40", "--mean-length", "80", "--seed", "0", "--out", "clean.jsonl")
run("gen-data", "--count", "40", "--mean-length", "80", "--seed", "1", "--jitter", "0.002", "--out", "jittery.jsonl")

# %%
# A run config names the model and a staged schedule over datasets. Unknown
# keys anywhere are rejected with exit code 2.
config = {
    "seed": 0,
    "model": {"k": 16, "channels": [16, 32]},
    "train": {"batch_size": 64, "lr": 0.001},
    "stages": [
        {"name": "real-style", "steps": 150,
         "datasets": [{"name": "jittery", "source_tag": "synthetic-jittery", "path": "jittery.jsonl"}]},
        {"name": "mixed", "steps": 150,
         "datasets": [{"name": "jittery", "source_tag": "synthetic-jittery", "path": "jittery.jsonl"},
                      {"name": "clean", "source_tag": "synthetic-clean", "path": "clean.jsonl"}]},
    ],
    "output": {"checkpoint": "tok.avq", "eval": "eval.json"},
}
with open("run.json", "w") as fh:
    json.dump(config, fh)
run("train", "--config", "run.json")

# %%
# Encoding writes one line of space-separated tokens per chunk under a
# header naming the scheme and the checkpoint hash; decoding inverts it.
run("encode", "--checkpoint", "tok.avq", "--in", "clean.jsonl", "--out", "clean.tok")
print(open("clean.tok").read()[:200], "...")
run("decode", "--checkpoint", "tok.avq", "--in", "clean.tok", "--out", "clean.decoded.jsonl")
run("encode", "--checkpoint", "tok.avq", "--scheme", "bin", "--in", "clean.jsonl", "--out", "clean.bin.tok")

# %%
# Evaluation, throughput and a malformed token file (exit code 1).
run("eval", "--checkpoint", "tok.avq", "--data", "clean.jsonl", "jittery.jsonl", "--all")
run("bench", "--checkpoint", "tok.avq", "--trials", "50", "--runs", "2")
with open("bad.tok", "w") as fh:
    fh.write("# scheme=vq\n0 256 300\n")
run("decode", "--checkpoint", "tok.avq", "--in", "bad.tok", "--out", "x.jsonl")
