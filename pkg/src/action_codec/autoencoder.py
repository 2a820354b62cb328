"""Convolutional residual VQ-VAE over normalized action chunks.

Encoder: embeddings -> stride-1 conv -> stride-2 convs (one per extra channel
width) -> flatten -> linear head to ``k``. Decoder mirrors it with transposed
convolutions and a final stride-1 conv back to 7 channels. All layers except
the heads and the output conv are followed by GELU. The model sees actions
only; there is no observation or language input anywhere.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erf

from . import numerics as nx
from . import rvq
from .data import ACTION_DIM, GRIPPER

PAD = 1
_INV_SQRT2 = 2.0**-0.5


@dataclass
class ModelConfig:
    n: int = 5
    d: int = ACTION_DIM
    k: int = 64
    channels: tuple[int, ...] = (32, 64, 128)
    kernel: int = 3
    num_quantizers: int = 7
    loss_weight: float = 4.0
    embedding_enabled: bool = True
    aggregate_quant_loss: bool = False
    reduction: str = "mean"  # or "sum": squared norms per chunk / latent, batch-averaged
    squash_gripper: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels:
            raise ValueError("channels must list at least the embedding width")
        if self.channels[0] % 2:
            raise ValueError("the first channel width carries the sinusoidal embedding and must be even")
        if self.n + 2 * PAD < self.kernel:
            raise ValueError(f"chunk length {self.n} too short for kernel width {self.kernel}")
        if self.loss_weight < 0:
            raise ValueError("loss weight must be non-negative")
        if self.d != ACTION_DIM:
            raise ValueError(f"action dimensionality is fixed at {ACTION_DIM}")
        if self.num_quantizers < 1:
            raise ValueError("need at least one quantization layer")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")

    def time_lengths(self) -> list[int]:
        """Sequence length after each encoder stage (index 0 is the input)."""
        lengths = [self.n]
        for _ in self.channels[1:]:
            lengths.append((lengths[-1] + 2 * PAD - self.kernel) // 2 + 1)
        return lengths

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LossBreakdown:
    total: float
    rec: float
    codebook: float
    commit: float
    total_var: nx.Var | None = field(default=None, repr=False)
    indices: np.ndarray | None = field(default=None, repr=False)
    residuals: list | None = field(default=None, repr=False)
    latents: np.ndarray | None = field(default=None, repr=False)


def time_embedding(n: int, width: int) -> np.ndarray:
    """Sinusoidal table, sin/cos interleaved: column ``2j`` is
    ``sin(t / 10000**(2j/width))`` and column ``2j+1`` the matching cosine."""
    if width % 2:
        raise ValueError(f"time embedding width must be even, got {width}")
    t = np.arange(n, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-(2.0 * np.arange(width // 2)) / width)
    out = np.empty((n, width))
    out[:, 0::2] = np.sin(t * freq)
    out[:, 1::2] = np.cos(t * freq)
    return out


class ActionVQVAE:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params = nx.ParamStore()
        rng = np.random.default_rng(seed)
        self._build(rng)
        self._time = time_embedding(config.n, config.channels[0])
        mask = np.zeros(ACTION_DIM)
        mask[GRIPPER] = 1.0
        self._grip_mask = mask
        self._lin_mask = 1.0 - mask

    # -- construction -------------------------------------------------------

    def _uniform(self, rng, name, shape, fan_in):
        s = np.sqrt(1.0 / fan_in)
        self.params.add(name, rng.uniform(-s, s, shape))

    def _build(self, rng):
        c = self.config
        ch = c.channels
        w = c.kernel
        L = c.time_lengths()
        self._uniform(rng, "emb.proj", (ch[0], ACTION_DIM), ACTION_DIM)
        if c.embedding_enabled:
            self._uniform(rng, "emb.type", (ACTION_DIM, ch[0]), ACTION_DIM)
        self._uniform(rng, "enc.conv0.w", (ch[0], ch[0], w), ch[0] * w)
        self._uniform(rng, "enc.conv0.b", (ch[0],), ch[0] * w)
        for i in range(1, len(ch)):
            self._uniform(rng, f"enc.conv{i}.w", (ch[i], ch[i - 1], w), ch[i - 1] * w)
            self._uniform(rng, f"enc.conv{i}.b", (ch[i],), ch[i - 1] * w)
        flat = L[-1] * ch[-1]
        self._uniform(rng, "enc.head.w", (c.k, flat), flat)
        self._uniform(rng, "enc.head.b", (c.k,), flat)
        self._uniform(rng, "dec.head.w", (flat, c.k), c.k)
        self._uniform(rng, "dec.head.b", (flat,), c.k)
        for i in range(len(ch) - 1, 0, -1):
            self._uniform(rng, f"dec.deconv{i}.w", (ch[i], ch[i - 1], w), ch[i] * w)
            self._uniform(rng, f"dec.deconv{i}.b", (ch[i - 1],), ch[i] * w)
        self._uniform(rng, "dec.out.w", (ACTION_DIM, ch[0], w), ch[0] * w)
        self._uniform(rng, "dec.out.b", (ACTION_DIM,), ch[0] * w)
        self.books = rvq.RvqCodebooks.random(c.num_quantizers, c.k, rng)
        for i, book in enumerate(self.books.layers):
            self.params.add(f"rvq.layer{i}.codes", book.codes)
            # the store copies; point the codebook at the stored array
            book.codes = self.params.params[f"rvq.layer{i}.codes"]
        self._output_padding = []
        for i in range(len(ch) - 1, 0, -1):
            full = (L[i] - 1) * 2 + w
            op = L[i - 1] - full + 2 * PAD
            if not 0 <= op < 2:
                raise ValueError(f"cannot mirror encoder stage {i} (lengths {L})")
            self._output_padding.append(op)

    def code_vars(self) -> list[nx.Var]:
        return [self.params[f"rvq.layer{i}.codes"] for i in range(self.config.num_quantizers)]

    def num_parameters(self, include_codebooks: bool = True) -> int:
        return sum(
            p.size for n, p in self.params.params.items() if include_codebooks or not n.startswith("rvq.")
        )

    # -- forward pieces -----------------------------------------------------

    def apply_embeddings(self, chunks) -> nx.Var:
        """Lift ``(B, n, 7)`` normalized chunks to ``(B, n, width)``.

        Both modes share a bias-free linear projection. With embeddings on,
        every component also adds its learned type vector scaled by the
        component value, and the sinusoidal time row is added per step.
        """
        a = nx.as_var(chunks)
        if a.value.ndim == 2:
            a = nx.Var(a.value[None])
        p = self.params
        h = nx.linear(a, p["emb.proj"])
        if self.config.embedding_enabled:
            B, n, _ = a.shape
            typed = nx.matmul(nx.reshape(a, (B * n, ACTION_DIM)), p["emb.type"])
            h = nx.add(h, nx.reshape(typed, (B, n, -1)))
            h = nx.add(h, nx.Var(self._time))
        return h

    def encode_var(self, chunks) -> nx.Var:
        p = self.params
        h = self.apply_embeddings(chunks)
        h = nx.gelu(nx.conv1d(h, p["enc.conv0.w"], p["enc.conv0.b"], 1, PAD))
        for i in range(1, len(self.config.channels)):
            h = nx.gelu(nx.conv1d(h, p[f"enc.conv{i}.w"], p[f"enc.conv{i}.b"], 2, PAD))
        B = h.shape[0]
        h = nx.reshape(h, (B, -1))
        return nx.linear(h, p["enc.head.w"], p["enc.head.b"])

    def decode_var(self, q: nx.Var) -> nx.Var:
        c = self.config
        p = self.params
        L = c.time_lengths()
        qv = q if q.value.ndim == 2 else nx.Var(q.value[None])
        h = nx.gelu(nx.linear(qv, p["dec.head.w"], p["dec.head.b"]))
        h = nx.reshape(h, (h.shape[0], L[-1], c.channels[-1]))
        for op, i in zip(self._output_padding, range(len(c.channels) - 1, 0, -1)):
            h = nx.gelu(nx.conv_transpose1d(h, p[f"dec.deconv{i}.w"], p[f"dec.deconv{i}.b"], 2, PAD, op))
        out = nx.conv1d(h, p["dec.out.w"], p["dec.out.b"], 1, PAD)
        if c.squash_gripper:
            out = nx.add(nx.mul(out, self._lin_mask), nx.mul(nx.tanh(out), self._grip_mask))
        return out

    def encode(self, chunks: np.ndarray) -> np.ndarray:
        """Latents for normalized chunks; ``(n, 7) -> (k,)``, ``(B, n, 7) -> (B, k)``."""
        x = np.asarray(chunks, dtype=np.float64)
        self._check_chunk_shape(x)
        z = self.encode_var(nx.Var(x)).value
        return z[0] if x.ndim == 2 else z

    def decode(self, q: np.ndarray) -> np.ndarray:
        """Normalized chunks from quantized latents; ``(k,) -> (n, 7)``."""
        q = np.asarray(q, dtype=np.float64)
        out = self.decode_var(nx.Var(q)).value
        return out[0] if q.ndim == 1 else out

    def frozen_decoder(self) -> "FrozenDecoder":
        """Snapshot of the current decoder weights for fast inference."""
        return FrozenDecoder(self)

    def quantize(self, latents: np.ndarray) -> rvq.QuantizeResult:
        return rvq.quantize_residual(latents, self.books)

    def reconstruct(self, chunks: np.ndarray) -> np.ndarray:
        z = self.encode(chunks)
        return self.decode(self.quantize(z).quantized)

    def _check_chunk_shape(self, x: np.ndarray) -> None:
        if x.shape[-2:] != (self.config.n, ACTION_DIM) or x.ndim not in (2, 3):
            raise ValueError(f"expected chunks of shape (..., {self.config.n}, {ACTION_DIM}), got {x.shape}")

    # -- loss -----------------------------------------------------------------

    def training_loss(self, chunks: np.ndarray) -> LossBreakdown:
        """Reconstruction plus ``loss_weight * (codebook + commit)``.

        Run inside a :class:`numerics.Tape` to get gradients from
        ``total_var``.
        """
        c = self.config
        x = np.asarray(chunks, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        self._check_chunk_shape(x)
        z = self.encode_var(nx.Var(x))
        tq = rvq.quantize_taped(z, self.code_vars(), aggregate=c.aggregate_quant_loss)
        recon = self.decode_var(tq.decoder_input)
        rec = nx.mean_all(nx.square(nx.sub(recon, nx.Var(x))))
        cb, cm = tq.codebook_loss, tq.commit_loss
        if c.reduction == "sum":
            rec = nx.mul(rec, float(c.n * ACTION_DIM))
            cb = nx.mul(cb, float(c.k))
            cm = nx.mul(cm, float(c.k))
        total = nx.add(rec, nx.mul(nx.add(cb, cm), c.loss_weight))
        return LossBreakdown(
            float(total.value),
            float(rec.value),
            float(cb.value),
            float(cm.value),
            total_var=total,
            indices=tq.indices,
            residuals=tq.residuals,
            latents=z.value,
        )


class FrozenDecoder:
    """The decoder with every layer folded into one dense matrix.

    The decoder's input is a single latent of fixed length, so each conv and
    transposed conv is a fixed linear map on the flattened activations. The
    codebooks are folded into the head as per-layer lookup tables. Matches
    :meth:`ActionVQVAE.decode` to rounding; later weight updates are not seen.
    """

    def __init__(self, model: ActionVQVAE):
        c = model.config
        p = model.params
        L = c.time_lengths()
        w_head = p["dec.head.w"].value
        self.head_bias = p["dec.head.b"].value.copy()
        self.tables = [book.codes @ w_head.T for book in model.books.layers]
        self.head_w = w_head.copy()
        self.layers = []
        T, C = L[-1], c.channels[-1]
        for op, i in zip(model._output_padding, range(len(c.channels) - 1, 0, -1)):
            w, b = p[f"dec.deconv{i}.w"], p[f"dec.deconv{i}.b"]
            f = lambda x, w=w, op=op: nx.conv_transpose1d(x, w, None, 2, PAD, op)
            T, C = self._fold(f, T, C, b.value)
        w, b = p["dec.out.w"], p["dec.out.b"]
        self._fold(lambda x: nx.conv1d(x, w, None, 1, PAD), T, C, b.value)
        self.shape = (c.n, ACTION_DIM)
        self.grip = np.flatnonzero(np.tile(model._grip_mask, c.n)) if c.squash_gripper else None

    def _fold(self, layer, T, C, bias):
        basis = np.eye(T * C).reshape(T * C, T, C)
        out = layer(nx.Var(basis)).value
        self.layers.append((out.reshape(T * C, -1), np.tile(bias, out.shape[1])))
        return out.shape[1], out.shape[2]

    @staticmethod
    def _gelu(x):
        return x * (0.5 + 0.5 * erf(x * _INV_SQRT2))

    def _finish(self, pre: np.ndarray) -> np.ndarray:
        h = self._gelu(pre)
        last = len(self.layers) - 1
        for j, (m, b) in enumerate(self.layers):
            h = h @ m + b
            if j < last:
                h = self._gelu(h)
        if self.grip is not None:
            h[..., self.grip] = np.tanh(h[..., self.grip])
        return h.reshape(h.shape[:-1] + self.shape)

    def decode(self, q: np.ndarray) -> np.ndarray:
        """Normalized chunk(s) from quantized latent(s)."""
        return self._finish(np.asarray(q, dtype=np.float64) @ self.head_w.T + self.head_bias)

    def decode_indices(self, indices: np.ndarray) -> np.ndarray:
        """Normalized chunk(s) from raw per-layer code indices ``(..., N_q)``."""
        idx = np.asarray(indices, dtype=np.int64)
        pre = self.head_bias + sum(t[idx[..., i]] for i, t in enumerate(self.tables))
        return self._finish(pre)
