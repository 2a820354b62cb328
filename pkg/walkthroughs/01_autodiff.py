"""
Reverse-mode gradients on numpy
===============================

Every model in the package runs on a small tape-based autodiff layer. This
walkthrough builds a two-layer network by hand, checks its gradients against
central differences and takes a few Adam steps.
"""

import numpy as np

from action_codec import numerics as nx

rng = np.random.default_rng(0)
params = nx.ParamStore()
params.add("w1", rng.normal(size=(16, 7)) * 0.3)
params.add("b1", np.zeros(16))
params.add("w2", rng.normal(size=(1, 16)) * 0.3)

x = rng.uniform(-1, 1, (32, 7))
y = np.sin(x.sum(axis=1, keepdims=True))


def loss():
    h = nx.gelu(nx.linear(nx.as_var(x), params["w1"], params["b1"]))
    out = nx.linear(h, params["w2"])
    return nx.mean_all(nx.square(nx.sub(out, y)))


# The check perturbs every parameter element in float64 and compares.
report = nx.finite_difference_check(loss, params)
print("worst relative error:", report.worst())

# %%
# A short optimization run. ``backward`` fills ``params.grads``; the Adam
# step consumes them.
for step in range(201):
    with nx.Tape() as tape:
        value = loss()
    tape.backward(value, params)
    nx.adam_step(params, 1e-2)
    if step % 50 == 0:
        print(f"step {step:3d} loss {value.value:.4f}")

# %%
# The same forward primitives exist for temporal convolutions. A stride-2
# convolution halves the time axis; its transpose restores it.
kern = rng.normal(size=(4, 7, 3)) * 0.2
seq = rng.normal(size=(2, 8, 7))  # (batch, time, channels)
down = nx.temporal_conv_forward(seq, kern, np.zeros(4), stride=2, padding=1)
print("conv output shape:", down.shape)
