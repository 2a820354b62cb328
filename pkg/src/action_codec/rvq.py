"""Residual vector quantization.

Each layer holds 256 codes of width ``k``. Quantizing ``x`` runs
``r_1 = x, r_{i+1} = r_i - q_i(r_i)`` and the quantized latent is the sum of
the selected codes. Indices returned here are raw per-layer indices in
``[0, 255]``; the layer offset is applied by the codec.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx

CODEBOOK_SIZE = 256
DEAD_THRESHOLD_STEPS = 200
REINIT_NOISE = 1e-3
REINIT_NOISE_MAX = 1e-2


@dataclass
class Codebook:
    codes: np.ndarray  # (256, k); shared with the ParamStore during training
    usage_counts: np.ndarray = None
    last_used_step: np.ndarray = None

    def __post_init__(self):
        if self.codes.ndim != 2 or self.codes.shape[0] != CODEBOOK_SIZE:
            raise ValueError(f"codebook must be ({CODEBOOK_SIZE}, k), got {self.codes.shape}")
        if self.usage_counts is None:
            self.usage_counts = np.zeros(CODEBOOK_SIZE, dtype=np.int64)
        if self.last_used_step is None:
            self.last_used_step = np.zeros(CODEBOOK_SIZE, dtype=np.int64)

    @property
    def k(self) -> int:
        return self.codes.shape[1]


@dataclass
class RvqCodebooks:
    layers: list[Codebook]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("need at least one quantization layer")
        ks = {b.k for b in self.layers}
        if len(ks) != 1:
            raise ValueError(f"all layers must share latent width, got {sorted(ks)}")

    @property
    def k(self) -> int:
        return self.layers[0].k

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @classmethod
    def random(cls, num_layers: int, k: int, rng: np.random.Generator, scale: float | None = None) -> "RvqCodebooks":
        s = np.sqrt(1.0 / k) if scale is None else scale
        return cls([Codebook(rng.uniform(-s, s, (CODEBOOK_SIZE, k))) for _ in range(num_layers)])


@dataclass
class QuantizeResult:
    indices: np.ndarray  # (..., N_q) raw per-layer indices
    quantized: np.ndarray  # (..., k)
    residuals: np.ndarray  # (..., N_q + 1, k); residuals[..., 0, :] == x
    codebook_loss: np.ndarray  # sum_i ||sg(r_i) - q_i(r_i)||^2, per vector
    commit_loss: np.ndarray  # numerically identical to codebook_loss; differs only in gradient routing


def nearest_code(v: np.ndarray, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the squared-Euclidean nearest code, lowest index on ties.

    ``v`` may be a single vector or a ``(B, k)`` batch. Candidates come from
    the fast ``|v|^2 - 2 v.c + |c|^2`` expansion; any code within its
    rounding slack of the minimum is then re-ranked with exact row-wise
    distances, so exact ties resolve to the lowest index.
    """
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    vb = v[None] if single else v
    if vb.shape[-1] != codes.shape[1]:
        raise ValueError(f"vector width {vb.shape[-1]} does not match codebook width {codes.shape[1]}")
    if not np.isfinite(vb).all():
        raise nx.NonFiniteError("nearest_code: non-finite input")
    vn = np.einsum("bk,bk->b", vb, vb)
    cn = np.einsum("ck,ck->c", codes, codes)
    d2 = vn[:, None] - 2.0 * (vb @ codes.T) + cn[None, :]
    best = d2.min(axis=1)
    slack = 1e-9 * (vn + cn.max()) + 1e-300
    cand = d2 <= (best + slack)[:, None]
    idx = np.argmax(cand, axis=1)
    for b in np.flatnonzero(cand.sum(axis=1) > 1):
        c = np.flatnonzero(cand[b])
        diff = codes[c] - vb[b]
        idx[b] = c[np.argmin(np.einsum("ck,ck->c", diff, diff))]
    if single:
        return idx[0], codes[idx[0]]
    return idx, codes[idx]


def quantize_residual(x: np.ndarray, books: RvqCodebooks) -> QuantizeResult:
    """Run the residual recurrence for one vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None] if single else x
    B, k = xb.shape
    nq = books.num_layers
    residuals = np.empty((B, nq + 1, k))
    indices = np.empty((B, nq), dtype=np.int64)
    quantized = np.zeros((B, k))
    loss = np.zeros(B)
    r = xb
    residuals[:, 0] = r
    for i, book in enumerate(books.layers):
        idx, q = nearest_code(r, book.codes)
        indices[:, i] = idx
        quantized = quantized + q
        d = r - q
        loss += np.einsum("bk,bk->b", d, d)
        r = d
        residuals[:, i + 1] = r
    if single:
        return QuantizeResult(indices[0], quantized[0], residuals[0], loss[0], loss[0].copy())
    return QuantizeResult(indices, quantized, residuals, loss, loss.copy())


def lookup(indices: np.ndarray, books: RvqCodebooks) -> np.ndarray:
    """Sum of the selected codes; ``indices`` is ``(..., N_q)`` raw indices."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.shape[-1] != books.num_layers:
        raise ValueError(f"expected {books.num_layers} indices per vector, got {indices.shape[-1]}")
    out = np.zeros(indices.shape[:-1] + (books.k,))
    for i, book in enumerate(books.layers):
        out = out + book.codes[indices[..., i]]
    return out


# ---------------------------------------------------------------------------
# differentiable path


@dataclass
class TapedQuantization:
    decoder_input: nx.Var  # straight-through output: value q(x), gradient to x
    codebook_loss: nx.Var  # mean over batch and latent width
    commit_loss: nx.Var
    indices: np.ndarray
    residuals: list[np.ndarray] = field(repr=False)


def straight_through(x: nx.Var, q: nx.Var) -> nx.Var:
    return nx.straight_through(x, q)


def quantize_taped(x: nx.Var, code_vars: list[nx.Var], aggregate: bool = False) -> TapedQuantization:
    """Differentiable RVQ for a ``(B, k)`` batch of latents.

    Per-layer losses (default)::

        codebook = sum_i mean ||sg(r_i) - q_i||^2
        commit   = sum_i mean ||r_i - sg(q_i)||^2

    with ``r_{i+1} = r_i - sg(q_i)``, so codebooks only learn through the
    codebook term and commitment only moves the encoder. ``aggregate=True``
    puts the same terms on ``x`` and ``q(x) = sum_i q_i`` instead.
    "mean" averages over batch and latent width.
    """
    B, k = x.shape
    r = x
    picked: list[nx.Var] = []
    indices = np.empty((B, len(code_vars)), dtype=np.int64)
    residuals = [x.value]
    cb_terms, cm_terms = [], []
    for i, codes in enumerate(code_vars):
        idx = nx.frozen(lambda: nearest_code(r.value, codes.value)[0])
        indices[:, i] = idx
        q_i = nx.take_rows(codes, idx)
        picked.append(q_i)
        if not aggregate:
            cb_terms.append(nx.mean_all(nx.square(nx.sub(nx.stop_gradient(r), q_i))))
            cm_terms.append(nx.mean_all(nx.square(nx.sub(r, nx.stop_gradient(q_i)))))
        r = nx.sub(r, nx.stop_gradient(q_i))
        residuals.append(r.value)
    q_sum = picked[0]
    for q_i in picked[1:]:
        q_sum = nx.add(q_sum, q_i)
    if aggregate:
        codebook = nx.mean_all(nx.square(nx.sub(nx.stop_gradient(x), q_sum)))
        commit = nx.mean_all(nx.square(nx.sub(x, nx.stop_gradient(q_sum))))
    else:
        codebook, commit = cb_terms[0], cm_terms[0]
        for a, b in zip(cb_terms[1:], cm_terms[1:]):
            codebook = nx.add(codebook, a)
            commit = nx.add(commit, b)
    dec_in = nx.straight_through(x, nx.stop_gradient(q_sum))
    return TapedQuantization(dec_in, codebook, commit, indices, residuals)


# ---------------------------------------------------------------------------
# maintenance and diagnostics


def init_from_latents(books: RvqCodebooks, latents: np.ndarray, rng: np.random.Generator) -> None:
    """Seed every layer's codes from the batch residuals that layer sees.

    Layers are filled in order so layer ``i`` draws from residuals left by
    the freshly initialised layers before it. Codes get tiny noise so that
    duplicated draws are distinguishable.
    """
    r = np.asarray(latents, dtype=np.float64)
    for book in books.layers:
        pick = rng.choice(r.shape[0], size=CODEBOOK_SIZE, replace=r.shape[0] < CODEBOOK_SIZE)
        book.codes[...] = r[pick] + _small_noise(rng, (CODEBOOK_SIZE, book.k))
        _, q = nearest_code(r, book.codes)
        r = r - q


def _small_noise(rng: np.random.Generator, shape) -> np.ndarray:
    noise = rng.normal(0.0, REINIT_NOISE / np.sqrt(shape[-1]), shape)
    norms = np.linalg.norm(noise, axis=-1, keepdims=True)
    return noise * np.minimum(1.0, REINIT_NOISE_MAX / np.maximum(norms, 1e-300))


def codebook_maintenance(
    books: RvqCodebooks,
    batch_indices: np.ndarray,
    batch_residuals: list[np.ndarray] | np.ndarray,
    step: int,
    rng: np.random.Generator,
    dead_threshold_steps: int = DEAD_THRESHOLD_STEPS,
) -> list[np.ndarray]:
    """Update usage counters and revive codes idle for too long.

    ``batch_residuals[i]`` is the ``(B, k)`` input of layer ``i`` for this
    batch. A dead code is replaced by one of those rows plus noise of norm at
    most ``1e-2``. Returns the revived code indices per layer so callers can
    reset optimizer state for those rows.
    """
    revived = []
    for i, book in enumerate(books.layers):
        idx = batch_indices[:, i]
        counts = np.bincount(idx, minlength=CODEBOOK_SIZE)
        book.usage_counts += counts
        book.last_used_step[counts > 0] = step
        dead = np.flatnonzero(step - book.last_used_step >= dead_threshold_steps)
        if dead.size:
            src = np.asarray(batch_residuals[i])
            pick = rng.integers(0, src.shape[0], size=dead.size)
            book.codes[dead] = src[pick] + _small_noise(rng, (dead.size, book.k))
            book.last_used_step[dead] = step
        revived.append(dead)
    return revived


@dataclass
class LayerUtilization:
    fraction_used: float
    perplexity: float


def utilization_from_indices(indices: np.ndarray) -> list[LayerUtilization]:
    """Per-layer share of codes used and ``exp(entropy)`` of code usage."""
    indices = np.asarray(indices)
    out = []
    for i in range(indices.shape[1]):
        counts = np.bincount(indices[:, i], minlength=CODEBOOK_SIZE).astype(np.float64)
        p = counts / counts.sum()
        nz = p[p > 0]
        out.append(LayerUtilization(float((counts > 0).sum() / CODEBOOK_SIZE), float(np.exp(-(nz * np.log(nz)).sum()))))
    return out


def utilization_stats(books: RvqCodebooks, sample_latents: np.ndarray, min_samples: int = 1000) -> list[LayerUtilization]:
    sample_latents = np.asarray(sample_latents)
    if sample_latents.shape[0] < min_samples:
        raise ValueError(f"utilization needs at least {min_samples} latents, got {sample_latents.shape[0]}")
    return utilization_from_indices(quantize_residual(sample_latents, books).indices)
