"""Training loop, checkpoints, evaluation and the data-scaling harness.

Checkpoint files (``.avq``) are laid out as::

    b"AVQ1" | uint32 LE header length | UTF-8 JSON header
           | float32 LE tensor payloads in directory order | uint32 LE CRC32

The CRC covers every byte before it. The header carries the format version,
model config, normalization stats, codebook usage counters, training step,
seed, a loss-history summary and the tensor directory (name, shape, byte
offset into the payload).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from . import rvq
from .autoencoder import ActionVQVAE, LossBreakdown, ModelConfig
from .data import (
    ChunkPool,
    DatasetManifest,
    NormalizationStats,
    SyntheticSpec,
    Trajectory,
    chunk_trajectories,
    compute_norm_stats,
    denormalize,
    generate_synthetic,
    is_heldout,
    mean_jerk,
    normalize,
)

log = logging.getLogger(__name__)

MAGIC = b"AVQ1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Base class for unreadable checkpoint files."""


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TrainingAborted(RuntimeError):
    """Training hit a non-finite value; ``last_good`` holds the state before the failing step."""

    def __init__(self, message: str, last_good: "Checkpoint"):
        super().__init__(message)
        self.last_good = last_good


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    tensors: dict[str, np.ndarray]  # float32
    stats: NormalizationStats
    usage: list[dict[str, list[int]]]
    step: int = 0
    seed: int = 0
    history: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def header(self, directory: list[dict]) -> dict:
        return {
            "format_version": self.format_version,
            "model_config": self.model_config.to_dict(),
            "stats": self.stats.to_dict(),
            "usage": self.usage,
            "step": self.step,
            "seed": self.seed,
            "history": self.history,
            "tensors": directory,
        }

    def to_bytes(self) -> bytes:
        directory, payload, offset = [], [], 0
        for name, arr in self.tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
            payload.append(raw)
            offset += len(raw)
        head = json.dumps(self.header(directory), sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = MAGIC + struct.pack("<I", len(head)) + head + b"".join(payload)
        return body + struct.pack("<I", zlib.crc32(body))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]

    def bit_equal(self, other: "Checkpoint") -> bool:
        return self.to_bytes() == other.to_bytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < len(MAGIC) + 8:
            raise CheckpointTruncatedError(f"checkpoint truncated: only {len(blob)} bytes")
        body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
        if zlib.crc32(body) != crc:
            declared = _declared_size(blob)
            if declared is not None and declared > len(blob):
                raise CheckpointTruncatedError(f"checkpoint truncated: {len(blob)} of {declared} bytes present")
            raise CheckpointChecksumError("checkpoint checksum mismatch (file corrupted)")
        if blob[:4] != MAGIC:
            raise CheckpointError(f"not a checkpoint file (magic {blob[:4]!r})")
        (hlen,) = struct.unpack("<I", blob[4:8])
        head = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
        if head.get("format_version") != FORMAT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint format version {head.get('format_version')} not supported (reader is v{FORMAT_VERSION})"
            )
        base = 8 + hlen
        tensors = {}
        for entry in head["tensors"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            start = base + entry["offset"]
            if start + 4 * count > len(body):
                raise CheckpointTruncatedError(f"tensor {entry['name']!r} extends past end of file")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(entry["shape"])
            tensors[entry["name"]] = arr.astype(np.float32)
        return cls(
            model_config=ModelConfig.from_dict(head["model_config"]),
            tensors=tensors,
            stats=NormalizationStats.from_dict(head["stats"]),
            usage=head["usage"],
            step=head["step"],
            seed=head["seed"],
            history=head["history"],
            format_version=head["format_version"],
        )


def _declared_size(blob: bytes) -> int | None:
    try:
        (hlen,) = struct.unpack("<I", blob[4:8])
        head = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
        payload = sum(4 * int(np.prod(t["shape"], dtype=np.int64)) for t in head["tensors"])
        return 8 + hlen + payload + 4
    except Exception:
        return None


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def checkpoint_from_model(
    model: ActionVQVAE, stats: NormalizationStats, step: int = 0, seed: int = 0, history: dict | None = None
) -> Checkpoint:
    tensors = {n: p.astype(np.float32) for n, p in model.params.params.items()}
    usage = [
        {"usage_counts": b.usage_counts.tolist(), "last_used_step": b.last_used_step.tolist()}
        for b in model.books.layers
    ]
    return Checkpoint(model.config, tensors, stats, usage, step, seed, dict(history or {}))


def model_from_checkpoint(ckpt: Checkpoint) -> ActionVQVAE:
    model = ActionVQVAE(ckpt.model_config, seed=0)
    if set(model.params.names()) != set(ckpt.tensors):
        raise CheckpointError("checkpoint tensors do not match the model layout")
    for name, arr in ckpt.tensors.items():
        model.params.set_value(name, arr.astype(np.float64))
    for book, u in zip(model.books.layers, ckpt.usage):
        book.usage_counts[:] = u["usage_counts"]
        book.last_used_step[:] = u["last_used_step"]
    return model


# ---------------------------------------------------------------------------
# training


@dataclass
class Stage:
    manifest: DatasetManifest
    steps: int
    name: str = ""


@dataclass
class TrainConfig:
    steps: int
    batch_size: int = 1024
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    schedule: list[Stage] = field(default_factory=list)
    dead_threshold_steps: int = rvq.DEAD_THRESHOLD_STEPS
    checkpoint_interval: int = 1000
    keep_checkpoints: int = 3
    checkpoint_dir: str | None = None
    chunk_stride: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule and sum(s.steps for s in self.schedule) != self.steps:
            raise ValueError(
                f"stage step counts sum to {sum(s.steps for s in self.schedule)}, config says {self.steps}"
            )


class Trainer:
    """Step-level driver around one model; batches come from a callable.

    ``sample(step, rng) -> (normalized chunks, source ids)``.
    """

    def __init__(
        self,
        model: ActionVQVAE,
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        dead_threshold_steps: int = rvq.DEAD_THRESHOLD_STEPS,
        seed: int = 0,
        init_codebooks: bool = True,
    ):
        self.model = model
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.dead_threshold_steps = dead_threshold_steps
        self.rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])
        self.needs_init = init_codebooks
        self.step = 0
        self.losses: list[float] = []

    def train_step(self, chunks: np.ndarray):
        model = self.model
        if self.needs_init:
            rvq.init_from_latents(model.books, model.encode(chunks), self.rng)
            self.needs_init = False
        with nx.Tape() as tape:
            lb = model.training_loss(chunks)
        tape.backward(lb.total_var, model.params)
        nx.adam_step(model.params, self.lr, self.beta1, self.beta2, self.eps)
        self.step += 1
        revived = rvq.codebook_maintenance(
            model.books, lb.indices, lb.residuals, self.step, self.rng, self.dead_threshold_steps
        )
        for i, rows in enumerate(revived):
            if rows.size:
                name = f"rvq.layer{i}.codes"
                model.params.m[name][rows] = 0.0
                model.params.v[name][rows] = 0.0
        self.losses.append(lb.total)
        return lb

    def fit(
        self, chunks: np.ndarray, steps: int, batch_size: int, seed: int = 0, final_lr: float | None = None
    ) -> list[float]:
        """Uniformly resample ``batch_size`` rows of ``chunks`` for ``steps`` steps.

        With ``final_lr`` the learning rate follows a cosine from its current
        value down to ``final_lr`` over these steps.
        """
        rng = np.random.default_rng(seed)
        lr0 = self.lr
        for i in range(steps):
            if final_lr is not None:
                self.lr = final_lr + 0.5 * (lr0 - final_lr) * (1.0 + np.cos(np.pi * i / max(steps - 1, 1)))
            pick = rng.integers(0, len(chunks), size=batch_size)
            self.train_step(chunks[pick])
        self.lr = lr0
        return self.losses


def _collect(stages: Sequence[Stage]) -> list[Trajectory]:
    seen, out = set(), []
    for st in stages:
        for e in st.manifest.entries:
            if id(e) in seen:
                continue
            seen.add(id(e))
            out.extend(e.load())
    return out


def _loss_summary(losses: list[float], points: int = 100) -> list[float]:
    if not losses:
        return []
    arr = np.asarray(losses)
    edges = np.linspace(0, len(arr), min(points, len(arr)) + 1).astype(int)
    return [float(np.median(arr[a:b])) for a, b in zip(edges[:-1], edges[1:])]


def train(
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    stats: NormalizationStats | None = None,
    on_step: Callable[[int, LossBreakdown], None] | None = None,
) -> Checkpoint:
    """Run the staged schedule and return the final checkpoint.

    Heldout trajectories (id hash) are excluded from every stage. Stages run
    in order and each samples only from its own manifest, which is how the
    progressive real-then-synthetic curriculum is expressed.
    """
    model_config = model_config or ModelConfig()
    if not config.schedule and config.steps:
        raise ValueError("training schedule is empty")
    for st in config.schedule:
        if st.steps < 0:
            raise ValueError("stage step counts must be non-negative")
    trajs = [t for t in _collect(config.schedule) if not is_heldout(t.id)]
    if stats is None:
        stats = compute_norm_stats(trajs)

    def keep(t):
        return not is_heldout(t.id)

    pools = [
        ChunkPool(st.manifest, model_config.n, config.chunk_stride, lambda c: normalize(c, stats), keep)
        for st in config.schedule
    ]
    init_ss, sample_ss, _ = np.random.SeedSequence(config.seed).spawn(3)
    model = ActionVQVAE(model_config, seed=int(init_ss.generate_state(1)[0]))
    trainer = Trainer(
        model, config.lr, config.beta1, config.beta2, config.eps, config.dead_threshold_steps, seed=config.seed
    )
    sample_rng = np.random.default_rng(sample_ss)
    stage_tags: list[dict[str, int]] = []
    saved: list[Path] = []

    def snapshot(step: int) -> Checkpoint:
        hist = {"loss_curve": _loss_summary(trainer.losses), "stage_tag_counts": stage_tags}
        return checkpoint_from_model(model, stats, step, config.seed, hist)

    for si, (st, pool) in enumerate(zip(config.schedule, pools)):
        counts = {tag: 0 for tag in pool.tags}
        stage_tags.append(counts)
        for _ in range(st.steps):
            chunks, src = pool.sample(config.batch_size, sample_rng)
            for k, c in zip(*np.unique(src, return_counts=True)):
                counts[pool.tags[k]] += int(c)
            try:
                lb = trainer.train_step(chunks)
            except nx.NonFiniteError as exc:
                raise TrainingAborted(f"training aborted at step {trainer.step + 1}: {exc}", snapshot(trainer.step)) from exc
            if on_step is not None:
                on_step(trainer.step, lb)
            if config.checkpoint_dir and trainer.step % config.checkpoint_interval == 0:
                path = Path(config.checkpoint_dir) / f"step{trainer.step:08d}.avq"
                path.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(snapshot(trainer.step), path)
                saved.append(path)
                while len(saved) > config.keep_checkpoints:
                    saved.pop(0).unlink(missing_ok=True)
            if trainer.step % 100 == 0:
                log.debug("step %d stage %d loss %.6g", trainer.step, si, lb.total)
    return snapshot(trainer.step)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    mse: dict[str, float]  # normalized space, per source tag
    mse_physical: dict[str, float]
    utilization: list[float]
    perplexity: list[float]
    jerk_original: float
    jerk_reconstructed: float
    num_chunks: int
    mse_bound: float | None = None  # mean + 3 standard errors over trajectories, when known

    @property
    def overall_mse(self) -> float:
        return self.mse["all"]

    def to_dict(self) -> dict:
        return {
            "mse": self.mse,
            "mse_physical": self.mse_physical,
            "utilization": self.utilization,
            "perplexity": self.perplexity,
            "jerk_original": self.jerk_original,
            "jerk_reconstructed": self.jerk_reconstructed,
            "num_chunks": self.num_chunks,
            "mse_bound": self.mse_bound,
        }


def _reconstruct_batched(model: ActionVQVAE, chunks: np.ndarray, batch: int = 4096):
    recon = np.empty_like(chunks)
    idx = np.empty((len(chunks), model.config.num_quantizers), dtype=np.int64)
    for s in range(0, len(chunks), batch):
        z = model.encode(chunks[s : s + batch])
        qr = model.quantize(z)
        idx[s : s + batch] = qr.indices
        recon[s : s + batch] = model.decode(qr.quantized)
    return recon, idx


def evaluate_chunks(
    model_or_ckpt, chunks_physical: np.ndarray, tags: Sequence[str] | None = None, groups: Sequence[int] | None = None
) -> EvalReport:
    """Report on raw (physical-unit) chunks without any split filtering.

    ``groups`` labels each chunk with its trajectory; with two or more
    groups the report carries an upper bound on the normalized MSE that
    treats trajectories as the independent samples.
    """
    if isinstance(model_or_ckpt, Checkpoint):
        model, stats = model_from_checkpoint(model_or_ckpt), model_or_ckpt.stats
    else:
        model, stats = model_or_ckpt
    if len(chunks_physical) == 0:
        raise ValueError("no heldout chunks to evaluate")
    raw = np.asarray(chunks_physical, dtype=np.float64)
    norm = normalize(raw, stats)
    recon, idx = _reconstruct_batched(model, norm)
    err = ((recon - norm) ** 2).mean(axis=(1, 2))
    err_phys = ((denormalize(recon, stats) - raw) ** 2).mean(axis=(1, 2))
    tags = list(tags) if tags is not None else ["all"] * len(raw)
    mse, mse_phys = {"all": float(err.mean())}, {"all": float(err_phys.mean())}
    tag_arr = np.asarray(tags)
    for tag in sorted(set(tags)):
        sel = tag_arr == tag
        mse[tag] = float(err[sel].mean())
        mse_phys[tag] = float(err_phys[sel].mean())
    bound = None
    if groups is not None:
        g = np.asarray(groups)
        per = np.array([err[g == k].mean() for k in np.unique(g)])
        if per.size >= 2:
            bound = float(err.mean() + 3.0 * per.std(ddof=1) / np.sqrt(per.size))
    util = rvq.utilization_from_indices(idx)
    return EvalReport(
        mse,
        mse_phys,
        [u.fraction_used for u in util],
        [u.perplexity for u in util],
        mean_jerk(raw),
        mean_jerk(denormalize(recon, stats)),
        len(raw),
        bound,
    )


def evaluate(
    ckpt: Checkpoint,
    trajectories: Sequence[Trajectory] | DatasetManifest,
    max_chunks: int = 20000,
    enforce_split: bool = True,
) -> EvalReport:
    """Heldout reconstruction report.

    Only trajectories on the heldout side of the id-hash split are used
    unless ``enforce_split`` is off. Chunks use stride 1 and are thinned
    evenly to at most ``max_chunks``.
    """
    if isinstance(trajectories, DatasetManifest):
        trajectories = [t for e in trajectories.entries for t in e.load()]
    held = [t for t in trajectories if is_heldout(t.id)] if enforce_split else list(trajectories)
    n = ckpt.model_config.n
    chunks, tags, groups = [], [], []
    for i, t in enumerate(held):
        c = chunk_trajectories([t], n, 1)
        chunks.append(c)
        tags.extend([t.source_tag] * len(c))
        groups.extend([i] * len(c))
    if not chunks or sum(len(c) for c in chunks) == 0:
        raise ValueError("heldout set is empty")
    allc = np.concatenate(chunks)
    if len(allc) > max_chunks:
        keep = np.linspace(0, len(allc) - 1, max_chunks).astype(int)
        allc = allc[keep]
        tags = [tags[i] for i in keep]
        groups = [groups[i] for i in keep]
    return evaluate_chunks(ckpt, allc, tags, groups)


# ---------------------------------------------------------------------------
# data-scaling experiment

SCALING_MEAN_LENGTH = 400


@dataclass
class ScalingRow:
    train_size: int
    heldout_mse: float
    utilization: float
    perplexity: float


def synthetic_pool(
    min_train_chunks: int, n: int, seed: int, spec: SyntheticSpec | None = None, batch: int = 64
) -> tuple[list[Trajectory], list[Trajectory]]:
    """Generate synthetic trajectories until the train side holds enough chunks.

    Returns ``(train, heldout)`` by id hash. Trajectories are produced in a
    fixed order, so a larger request extends a smaller one.
    """
    spec = spec or SyntheticSpec(count=batch, seed=seed)
    train_side, held = [], []
    total, i = 0, 0
    while total < min_train_chunks:
        part = generate_synthetic(
            SyntheticSpec(**{**spec.__dict__, "count": batch, "seed": seed * 100003 + i, "id_prefix": f"pool{i}"})
        )
        for t in part:
            if is_heldout(t.id):
                held.append(t)
            else:
                train_side.append(t)
                total += max(0, len(t) - n + 1)
        i += 1
    return train_side, held


def first_chunks(trajs: Sequence[Trajectory], size: int, n: int) -> np.ndarray:
    out, total = [], 0
    for t in trajs:
        c = chunk_trajectories([t], n, 1)
        out.append(c)
        total += len(c)
        if total >= size:
            break
    allc = np.concatenate(out)
    if len(allc) < size:
        raise ValueError(f"pool holds only {len(allc)} chunks, {size} requested")
    return allc[:size]


def scaling_experiment(
    sizes: Sequence[int],
    model_config: ModelConfig,
    steps: int,
    batch_size: int,
    seed: int,
    lr: float = 1e-3,
    heldout_chunks: int = 5000,
    data_spec: SyntheticSpec | None = None,
    csv_path: str | Path | None = None,
    plot_path: str | Path | None = None,
) -> list[ScalingRow]:
    """One training run per data volume, everything else held fixed.

    Training sets are nested prefixes of one synthetic pool; the heldout set
    and normalization stats are shared by all runs. The default pool uses
    long trajectories so that a chunk budget maps to few distinct paths and
    coverage, not optimization noise, separates the sizes.
    """
    data_spec = data_spec or SyntheticSpec(count=64, seed=seed, mean_length=SCALING_MEAN_LENGTH)
    sizes = list(sizes)
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing")
    n = model_config.n
    train_trajs, held_trajs = synthetic_pool(sizes[-1], n, seed, data_spec)
    stats = compute_norm_stats(train_trajs)
    held = chunk_trajectories(held_trajs, n, 1)
    if len(held) > heldout_chunks:
        held = held[np.linspace(0, len(held) - 1, heldout_chunks).astype(int)]
    rows = []
    for size in sizes:
        chunks = normalize(first_chunks(train_trajs, size, n), stats)
        model = ActionVQVAE(model_config, seed=seed)
        trainer = Trainer(model, lr=lr, seed=seed)
        trainer.fit(chunks, steps, batch_size, seed=seed + 1)
        rep = evaluate_chunks((model, stats), held)
        rows.append(
            ScalingRow(size, rep.overall_mse, float(np.mean(rep.utilization)), float(np.mean(rep.perplexity)))
        )
        log.info("scaling size=%d heldout_mse=%.6g", size, rep.overall_mse)
    if csv_path is not None:
        write_scaling_csv(rows, csv_path)
    if plot_path is not None:
        Path(plot_path).write_text(
            json.dumps({"x": [r.train_size for r in rows], "y": [r.heldout_mse for r in rows],
                        "xlabel": "train_size", "ylabel": "heldout_mse", "xscale": "log"}, indent=1)
        )
    return rows


def write_scaling_csv(rows: Sequence[ScalingRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["train_size", "heldout_mse", "utilization", "perplexity"])
        for r in rows:
            w.writerow([r.train_size, repr(r.heldout_mse), repr(r.utilization), repr(r.perplexity)])


@dataclass
class OverfitResult:
    mse: float
    steps: int
    passed: bool


def overfit_oracle(
    model_config: ModelConfig,
    max_steps: int = 2000,
    tolerance: float = 1e-3,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 8,
    check_every: int = 50,
) -> OverfitResult:
    """Fit one repeated random chunk and report when its normalized MSE drops below ``tolerance``.

    A model that cannot memorize a single chunk has a broken gradient path,
    so this is the cheapest convergence smoke test there is.
    """
    rng = np.random.default_rng(seed)
    chunk = rng.uniform(-1, 1, (model_config.n, model_config.d))
    chunk[:, -1] = np.where(chunk[:, -1] > 0, 1.0, -1.0)
    model = ActionVQVAE(model_config, seed=seed)
    trainer = Trainer(model, lr=lr, seed=seed)
    batch = np.repeat(chunk[None], batch_size, axis=0)
    mse = float(np.mean((model.reconstruct(chunk) - chunk) ** 2))
    for step in range(1, max_steps + 1):
        trainer.train_step(batch)
        if step % check_every == 0 or step == max_steps:
            mse = float(np.mean((model.reconstruct(chunk) - chunk) ** 2))
            if mse < tolerance:
                return OverfitResult(mse, step, True)
    return OverfitResult(mse, max_steps, False)


@dataclass
class AblationRow:
    embedding_enabled: bool
    heldout_mse: float
    overfit_mse: float
    overfit_steps: int
    converged: bool


ABLATION_HEADER = ["embedding_enabled", "heldout_mse", "overfit_mse", "overfit_steps", "converged"]


def embedding_ablation(
    train_chunks: np.ndarray,
    heldout_chunks: np.ndarray,
    model_config: ModelConfig,
    steps: int,
    batch_size: int,
    seed: int = 0,
    lr: float = 1e-3,
    csv_path: str | Path | None = None,
) -> list[AblationRow]:
    """Train with the action and time embeddings on, then off, on identical data.

    Chunks are already normalized. Each row also carries the overfit oracle
    for that configuration; no ordering between the two heldout numbers is
    implied.
    """
    rows = []
    for enabled in (True, False):
        cfg = ModelConfig.from_dict({**model_config.to_dict(), "embedding_enabled": enabled})
        model = ActionVQVAE(cfg, seed=seed)
        Trainer(model, lr=lr, seed=seed).fit(train_chunks, steps, batch_size, seed=seed + 1)
        rec, _ = _reconstruct_batched(model, heldout_chunks)
        held = float(np.mean((rec - heldout_chunks) ** 2))
        oracle = overfit_oracle(cfg, seed=seed)
        rows.append(AblationRow(enabled, held, oracle.mse, oracle.steps, oracle.passed))
        log.info("ablation embeddings=%s heldout_mse=%.6g overfit=%s", enabled, held, oracle.passed)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ABLATION_HEADER)
            for r in rows:
                w.writerow([int(r.embedding_enabled), repr(r.heldout_mse), repr(r.overfit_mse), r.overfit_steps, int(r.converged)])
    return rows
