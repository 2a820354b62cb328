"""Action tokenization in both directions.

Two schemes:

* ``vq``  -- a frozen VQ-VAE checkpoint maps an ``(n, 7)`` chunk to ``N_q``
  tokens; layer ``i`` (0-based) owns IDs ``[256 i, 256 i + 255]``.
* ``bin`` -- every scalar goes to one of 256 uniform bins between its 1st and
  99th percentile, ``n * 7`` tokens per chunk, IDs ``[0, 255]``.

Token streams on disk are plain text: a ``#`` header line followed by one
chunk per line as space-separated decimal IDs::

    # scheme=vq tokens_per_chunk=7 checkpoint=3f2a9c0d11e4b7a2
    12 301 640 901 1100 1400 1650
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rvq
from .data import ACTION_DIM, NormalizationStats, denormalize, normalize
from .training import Checkpoint, model_from_checkpoint

NUM_BINS = rvq.CODEBOOK_SIZE
REFERENCE_SPEEDUP = 11.84 / 4.16  # reference wall-clock ratio the token-count proxy is compared against


class TokenRangeError(ValueError):
    pass


class ModelMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TokenChunk:
    tokens: tuple[int, ...]
    model_ref: str
    scheme: str = "vq"

    def __post_init__(self):
        check_vq_ranges(self.tokens, len(self.tokens))


@dataclass(frozen=True)
class BinTokenSeq:
    tokens: tuple[int, ...]
    scheme: str = "bin"

    def __post_init__(self):
        for pos, t in enumerate(self.tokens):
            if not 0 <= t < NUM_BINS:
                raise TokenRangeError(f"bin token {t} at position {pos} outside [0, {NUM_BINS - 1}]")


def layer_range(layer: int) -> tuple[int, int]:
    """Inclusive token-ID bounds of 0-based layer ``layer``."""
    return NUM_BINS * layer, NUM_BINS * (layer + 1) - 1


def offset_tokens(raw: np.ndarray) -> np.ndarray:
    """Raw per-layer indices ``(..., N_q)`` to layer-offset token IDs."""
    raw = np.asarray(raw, dtype=np.int64)
    return raw + NUM_BINS * np.arange(raw.shape[-1])


def check_vq_ranges(tokens, num_layers: int) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64)
    if t.shape[-1] != num_layers:
        raise TokenRangeError(f"expected {num_layers} tokens per chunk, got {t.shape[-1]}")
    flat = t.reshape(-1, num_layers)
    raw = flat - NUM_BINS * np.arange(num_layers)
    if raw.min() < 0 or raw.max() >= NUM_BINS:
        row, i = np.argwhere((raw < 0) | (raw >= NUM_BINS))[0]
        lo, hi = layer_range(i)
        raise TokenRangeError(f"token {int(flat[row, i])} at layer {i + 1} outside its range [{lo}, {hi}]")
    return t


def strip_offsets(tokens) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64)
    return t - NUM_BINS * np.arange(t.shape[-1])


class VQTokenizer:
    """Frozen encoder/quantizer/decoder built once from a checkpoint."""

    def __init__(self, ckpt: Checkpoint):
        self.checkpoint = ckpt
        self.model = model_from_checkpoint(ckpt)
        self.stats = ckpt.stats
        self.n = ckpt.model_config.n
        self.num_layers = ckpt.model_config.num_quantizers
        self.model_ref = ckpt.hash
        self._decoder = self.model.frozen_decoder()

    def _chunks(self, chunk) -> np.ndarray:
        c = np.asarray(chunk, dtype=np.float64)
        if c.ndim not in (2, 3) or c.shape[-1] != ACTION_DIM:
            raise ValueError(f"expected (n, 7) chunk(s), got shape {c.shape}")
        if c.shape[-2] != self.n:
            raise ValueError(f"chunk length {c.shape[-2]} does not match the checkpoint's n={self.n}")
        return c

    def encode(self, chunk) -> np.ndarray:
        """Physical chunk(s) to layer-offset tokens, ``(n, 7) -> (N_q,)``."""
        c = self._chunks(chunk)
        z = self.model.encode(normalize(c, self.stats))
        return offset_tokens(self.model.quantize(z).indices)

    def decode(self, tokens) -> np.ndarray:
        """Layer-offset tokens back to physical chunk(s)."""
        t = check_vq_ranges(tokens, self.num_layers)
        return denormalize(self._decoder.decode_indices(strip_offsets(t)), self.stats)


def _tokenizer(ckpt) -> VQTokenizer:
    if isinstance(ckpt, VQTokenizer):
        return ckpt
    return VQTokenizer(ckpt)


def vq_encode(chunk, checkpoint) -> TokenChunk:
    tok = _tokenizer(checkpoint)
    return TokenChunk(tuple(int(v) for v in tok.encode(chunk)), tok.model_ref)


def vq_decode(tokens: TokenChunk, checkpoint) -> np.ndarray:
    tok = _tokenizer(checkpoint)
    if tokens.model_ref != tok.model_ref:
        raise ModelMismatchError(
            f"tokens were produced by checkpoint {tokens.model_ref}, decoding with {tok.model_ref}"
        )
    return tok.decode(tokens.tokens)


# ---------------------------------------------------------------------------
# binning baseline


def bin_indices(values, stats: NormalizationStats) -> np.ndarray:
    """Bin index per scalar for arrays whose last axis is the 7 action dims."""
    x = np.asarray(values, dtype=np.float64)
    lo, hi = stats.q01, stats.q99
    t = (np.clip(x, lo, hi) - lo) / (hi - lo) * NUM_BINS
    return np.minimum(np.floor(t), NUM_BINS - 1).astype(np.int64)


def bin_centers(bins, stats: NormalizationStats) -> np.ndarray:
    b = np.asarray(bins, dtype=np.float64)
    return stats.q01 + (b + 0.5) * (stats.q99 - stats.q01) / NUM_BINS


def bin_encode(chunk, stats: NormalizationStats) -> BinTokenSeq:
    """Row-major per-scalar bins of an ``(n, 7)`` chunk."""
    c = np.asarray(chunk, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != ACTION_DIM:
        raise ValueError(f"expected an (n, 7) chunk, got {c.shape}")
    return BinTokenSeq(tuple(int(v) for v in bin_indices(c, stats).reshape(-1)))


def bin_decode(tokens: BinTokenSeq, stats: NormalizationStats) -> np.ndarray:
    t = np.asarray(tokens.tokens, dtype=np.int64)
    if t.size % ACTION_DIM:
        raise ValueError(f"bin token count {t.size} is not a multiple of {ACTION_DIM}")
    return bin_centers(t.reshape(-1, ACTION_DIM), stats)


# ---------------------------------------------------------------------------
# vocabulary remap


@dataclass(frozen=True)
class VocabMap:
    """Action tokens occupy the last ``reserved_tail`` IDs of an LLM vocabulary."""

    vocab_size: int
    reserved_tail: int

    def __post_init__(self):
        if not 0 < self.reserved_tail <= self.vocab_size:
            raise ValueError(f"reserved tail {self.reserved_tail} must be in (0, {self.vocab_size}]")

    @classmethod
    def for_vq(cls, vocab_size: int, num_layers: int) -> "VocabMap":
        return cls(vocab_size, NUM_BINS * num_layers)

    @classmethod
    def for_bins(cls, vocab_size: int) -> "VocabMap":
        return cls(vocab_size, NUM_BINS)


def remap_to_vocab(token: int, vmap: VocabMap) -> int:
    if not 0 <= token < vmap.reserved_tail:
        raise TokenRangeError(f"action token {token} outside [0, {vmap.reserved_tail - 1}]")
    return vmap.vocab_size - vmap.reserved_tail + int(token)


def remap_from_vocab(vocab_id: int, vmap: VocabMap) -> int:
    base = vmap.vocab_size - vmap.reserved_tail
    if not base <= vocab_id < vmap.vocab_size:
        raise TokenRangeError(f"vocabulary id {vocab_id} is not an action token (tail starts at {base})")
    return int(vocab_id) - base


def tokens_per_action_ratio(n: int = 5, d: int = ACTION_DIM, num_quantizers: int = 7) -> dict:
    """Tokens needed for one ``n``-action chunk under each scheme."""
    return {"bin": n * d, "vq": num_quantizers, "ratio": n * d / num_quantizers}


# ---------------------------------------------------------------------------
# token stream text format


def format_token_stream(rows, scheme: str, tokens_per_chunk: int, checkpoint_hash: str, groups=None) -> str:
    """Header line plus one chunk per line.

    ``groups`` optionally lists ``(meta, row_count)`` pairs; each group is
    introduced by a ``#@ key=value ...`` line so trajectories can be rebuilt.
    """
    lines = [f"# scheme={scheme} tokens_per_chunk={tokens_per_chunk} checkpoint={checkpoint_hash}"]
    rows = [" ".join(str(int(v)) for v in row) for row in rows]
    if groups is None:
        lines += rows
    else:
        i = 0
        for meta, count in groups:
            lines.append("#@ " + " ".join(f"{k}={v}" for k, v in meta.items()))
            lines += rows[i : i + count]
            i += count
    return "\n".join(lines) + "\n"


def _fields(text: str, lineno: int) -> dict:
    out = {}
    for part in text.split():
        if "=" not in part:
            raise ValueError(f"line {lineno}: malformed header field {part!r}")
        k, v = part.split("=", 1)
        out[k] = v
    return out


def parse_token_groups(text: str) -> tuple[dict, list[tuple[dict, list[tuple[int, list[int]]]]]]:
    """Header fields plus ``(group meta, [(line_number, tokens)])`` in file order.

    Rows before any ``#@`` line form a group with empty meta.
    """
    header: dict = {}
    groups: list = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#@"):
            groups.append((_fields(s[2:], lineno), []))
            continue
        if s.startswith("#"):
            header.update(_fields(s[1:], lineno))
            continue
        try:
            row = [int(v) for v in s.split()]
        except ValueError:
            raise ValueError(f"line {lineno}: tokens must be decimal integers") from None
        if not groups:
            groups.append(({}, []))
        groups[-1][1].append((lineno, row))
    return header, groups


def parse_token_stream(text: str) -> tuple[dict, list[tuple[int, list[int]]]]:
    """Return the header fields and ``(line_number, tokens)`` for each chunk line.

    Empty input yields an empty header and no rows.
    """
    header, groups = parse_token_groups(text)
    return header, [r for _, rows in groups for r in rows]
