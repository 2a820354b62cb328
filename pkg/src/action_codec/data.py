"""Trajectory ingestion, cleaning, normalization, chunking and synthesis.

Actions are 7-vectors ``[x, y, z, rx, ry, rz, gripper]`` (meters, radians,
gripper in ``[0, 1]``). Whether they are absolute poses or deltas is left to
the dataset; nothing here depends on the convention.

Interchange format is JSONL, one trajectory per line::

    {"id": "traj-0", "source": "real", "rate_hz": 20.0, "actions": [[x, y, z, rx, ry, rz, g], ...]}
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ACTION_DIM = 7
POSE_DIMS = slice(0, 6)
GRIPPER = 6
SOURCE_TAGS = ("real", "sim", "synthetic-jittery", "synthetic-clean")
DEFAULT_CHUNK = 5
DEFAULT_EPS_POS = 1e-4
DEFAULT_EPS_ROT = 1e-3
DEGENERATE_WIDTH = 1e-6
MIN_STATS_SAMPLES = 100
HELDOUT_MODULUS = 20


class TrajectoryFormatError(ValueError):
    """A JSONL record failed validation. ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.path = path


@dataclass
class Trajectory:
    id: str
    source_tag: str
    rate_hz: float
    actions: np.ndarray  # (T, 7)

    def __post_init__(self):
        a = np.asarray(self.actions, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != ACTION_DIM:
            raise ValueError(f"trajectory {self.id!r}: actions must be (T, 7), got {a.shape}")
        if a.shape[0] < 1:
            raise ValueError(f"trajectory {self.id!r}: empty")
        if not np.isfinite(a).all():
            raise ValueError(f"trajectory {self.id!r}: non-finite action values")
        a = a.copy()
        a[:, GRIPPER] = np.clip(a[:, GRIPPER], 0.0, 1.0)
        self.actions = a

    def __len__(self) -> int:
        return self.actions.shape[0]

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "source": self.source_tag,
            "rate_hz": float(self.rate_hz),
            "actions": self.actions.tolist(),
        }


@dataclass
class NormalizationStats:
    q01: np.ndarray
    q99: np.ndarray
    count: int

    def __post_init__(self):
        self.q01 = np.asarray(self.q01, dtype=np.float64)
        self.q99 = np.asarray(self.q99, dtype=np.float64)
        if self.q01.shape != (ACTION_DIM,) or self.q99.shape != (ACTION_DIM,):
            raise ValueError("normalization bounds must have 7 entries")
        if not (self.q01 < self.q99).all():
            raise ValueError("normalization stats require q01 < q99 in every dimension")

    def to_dict(self) -> dict:
        return {"q01": self.q01.tolist(), "q99": self.q99.tolist(), "count": int(self.count)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.array(d["q01"]), np.array(d["q99"]), int(d["count"]))


# ---------------------------------------------------------------------------
# JSONL


def _parse_record(obj, lineno: int, path: str) -> Trajectory:
    if not isinstance(obj, dict):
        raise TrajectoryFormatError("record is not a JSON object", lineno, path)
    for key in ("id", "source", "rate_hz", "actions"):
        if key not in obj:
            raise TrajectoryFormatError(f"missing field {key!r}", lineno, path)
    if obj["source"] not in SOURCE_TAGS:
        raise TrajectoryFormatError(f"field 'source': unknown tag {obj['source']!r}", lineno, path)
    try:
        rate = float(obj["rate_hz"])
    except (TypeError, ValueError):
        raise TrajectoryFormatError("field 'rate_hz' is not a number", lineno, path) from None
    if not rate > 0:
        raise TrajectoryFormatError("field 'rate_hz' must be positive", lineno, path)
    rows = obj["actions"]
    if not isinstance(rows, list) or not rows:
        raise TrajectoryFormatError("field 'actions' must be a non-empty list", lineno, path)
    for r, row in enumerate(rows):
        if not isinstance(row, list) or len(row) != ACTION_DIM:
            n = len(row) if isinstance(row, list) else "non-list"
            raise TrajectoryFormatError(
                f"field 'actions' row {r}: expected 7 components, got {n}", lineno, path
            )
        for v in row:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise TrajectoryFormatError(f"field 'actions' row {r}: non-numeric component {v!r}", lineno, path)
    arr = np.array(rows, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise TrajectoryFormatError("field 'actions': non-finite value", lineno, path)
    return Trajectory(str(obj["id"]), obj["source"], rate, arr)


def load_trajectories(path: str | Path) -> list[Trajectory]:
    """Read a JSONL trajectory file. Blank lines are skipped."""
    path = Path(path)
    out: list[Trajectory] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TrajectoryFormatError(f"invalid JSON ({exc.msg})", lineno, str(path)) from None
            out.append(_parse_record(obj, lineno, str(path)))
    if not out:
        raise TrajectoryFormatError("file contains no trajectories", path=str(path))
    return out


def dump_trajectories(trajs: Iterable[Trajectory]) -> str:
    # repr-exact floats so load(save(x)) is value-identical
    return "".join(json.dumps(t.to_record(), separators=(",", ":")) + "\n" for t in trajs)


def save_trajectories(trajs: Iterable[Trajectory], path: str | Path) -> None:
    Path(path).write_text(dump_trajectories(trajs), encoding="utf-8")


# ---------------------------------------------------------------------------
# cleaning and statistics


def _is_noop(prev: np.ndarray, cur: np.ndarray, eps_pos: float, eps_rot: float) -> bool:
    return (
        np.linalg.norm(cur[0:3] - prev[0:3]) < eps_pos
        and np.linalg.norm(cur[3:6] - prev[3:6]) < eps_rot
        and cur[GRIPPER] == prev[GRIPPER]
    )


def filter_noops(traj: Trajectory, eps_pos: float = DEFAULT_EPS_POS, eps_rot: float = DEFAULT_EPS_ROT) -> Trajectory:
    """Drop actions that barely move relative to the last kept action.

    Comparing against the last *kept* action (not the raw predecessor) makes
    the filter idempotent and stops slow drifts from being erased step by step.
    """
    if eps_pos < 0 or eps_rot < 0:
        raise ValueError("no-op thresholds must be non-negative")
    a = traj.actions
    keep = [0]
    for t in range(1, len(a)):
        if not _is_noop(a[keep[-1]], a[t], eps_pos, eps_rot):
            keep.append(t)
    return Trajectory(traj.id, traj.source_tag, traj.rate_hz, a[keep])


def compute_norm_stats(trajs: Sequence[Trajectory]) -> NormalizationStats:
    """Per-dimension 1st/99th percentiles (linear interpolation)."""
    if not trajs:
        raise ValueError("no trajectories given")
    return stats_from_actions(np.concatenate([t.actions for t in trajs], axis=0))


def stats_from_actions(values: np.ndarray) -> NormalizationStats:
    """Percentile stats over an ``(N, 7)`` array (or anything reshapeable to it)."""
    allv = np.asarray(values, dtype=np.float64).reshape(-1, ACTION_DIM)
    if allv.shape[0] < MIN_STATS_SAMPLES:
        raise ValueError(f"need at least {MIN_STATS_SAMPLES} actions for percentile stats, got {allv.shape[0]}")
    q01, q99 = np.percentile(allv, [1.0, 99.0], axis=0, method="linear")
    q99 = np.where(q99 - q01 <= 0.0, q01 + DEGENERATE_WIDTH, q99)
    return NormalizationStats(q01, q99, int(allv.shape[0]))


def normalize(chunk: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Affine map ``[q01, q99] -> [-1, 1]`` per dimension, clamped."""
    x = np.asarray(chunk, dtype=np.float64)
    y = 2.0 * (x - stats.q01) / (stats.q99 - stats.q01) - 1.0
    return np.clip(y, -1.0, 1.0)


def denormalize(chunk: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    y = np.clip(np.asarray(chunk, dtype=np.float64), -1.0, 1.0)
    return stats.q01 + (y + 1.0) * 0.5 * (stats.q99 - stats.q01)


def chunk_trajectory(actions: np.ndarray, n: int = DEFAULT_CHUNK, stride: int = 1) -> np.ndarray:
    if n < 1 or stride < 1:
        raise ValueError("chunk length and stride must be >= 1")
    T = actions.shape[0]
    if T < n:
        return np.empty((0, n, ACTION_DIM))
    starts = np.arange(0, T - n + 1, stride)
    return actions[starts[:, None] + np.arange(n)[None, :]]


def chunk_trajectories(trajs: Sequence[Trajectory], n: int = DEFAULT_CHUNK, stride: int = 1) -> np.ndarray:
    """Sliding windows of length ``n``; tails shorter than ``n`` are dropped.

    Returns an ``(num_chunks, n, 7)`` array.
    """
    parts = [chunk_trajectory(t.actions, n, stride) for t in trajs]
    if not parts:
        return np.empty((0, n, ACTION_DIM))
    return np.concatenate(parts, axis=0)


def is_heldout(traj_id: str) -> bool:
    """Stable 5% split: CRC32 of the id, modulo 20, equals 0."""
    return zlib.crc32(traj_id.encode("utf-8")) % HELDOUT_MODULUS == 0


def split_heldout(trajs: Sequence[Trajectory]) -> tuple[list[Trajectory], list[Trajectory]]:
    train = [t for t in trajs if not is_heldout(t.id)]
    held = [t for t in trajs if is_heldout(t.id)]
    return train, held


def third_difference(actions: np.ndarray) -> np.ndarray:
    return np.diff(actions, n=3, axis=-2)


def mean_jerk(actions: np.ndarray, dims=POSE_DIMS) -> float:
    """Mean absolute discrete jerk over the pose dimensions.

    Accepts a single ``(T, 7)`` trajectory or a stack of chunks.
    """
    j = third_difference(np.asarray(actions)[..., dims])
    return float(np.abs(j).mean()) if j.size else 0.0


# ---------------------------------------------------------------------------
# synthetic trajectories


@dataclass
class SyntheticSpec:
    count: int
    mean_length: int = 200
    jitter_std: float = 0.0
    seed: int = 0
    source_tag: str | None = None
    rate_hz: float = 20.0
    workspace: float = 0.5
    min_segment: int = 40
    max_segment: int = 80
    max_rotation: float = 0.6
    id_prefix: str = "syn"


def min_jerk_profile(steps: int) -> np.ndarray:
    """``s(tau) = 10 tau^3 - 15 tau^4 + 6 tau^5`` sampled at ``tau = 1/steps .. 1``."""
    tau = np.arange(1, steps + 1) / steps
    return tau**3 * (10.0 - 15.0 * tau + 6.0 * tau * tau)


def generate_synthetic(spec: SyntheticSpec) -> list[Trajectory]:
    """Minimum-jerk point-to-point trajectories between random waypoints.

    Waypoints lie in a cube of side ``spec.workspace`` centred on the origin;
    orientation is interpolated with the same profile and the gripper toggles
    at each waypoint. With ``jitter_std > 0`` per-step Gaussian noise is added
    to the six pose dimensions from an independent stream, so the noise-free
    path is identical to the clean variant at the same seed.
    """
    if spec.count < 1:
        raise ValueError("count must be >= 1")
    tag = spec.source_tag or ("synthetic-jittery" if spec.jitter_std > 0 else "synthetic-clean")
    if tag not in SOURCE_TAGS:
        raise ValueError(f"unknown source tag {tag!r}")
    path_ss, noise_ss = np.random.SeedSequence(spec.seed).spawn(2)
    path_rng = np.random.default_rng(path_ss)
    noise_rng = np.random.default_rng(noise_ss)
    half = spec.workspace / 2.0
    out = []
    for i in range(spec.count):
        lo = max(spec.min_segment + 1, spec.mean_length // 2)
        length = int(path_rng.integers(lo, 2 * spec.mean_length - lo + 1))
        pos = path_rng.uniform(-half, half, 3)
        rot = path_rng.uniform(-spec.max_rotation, spec.max_rotation, 3)
        grip = float(path_rng.integers(0, 2))
        rows = [np.concatenate([pos, rot, [grip]])]
        while len(rows) < length:
            steps = int(path_rng.integers(spec.min_segment, spec.max_segment + 1))
            new_pos = path_rng.uniform(-half, half, 3)
            new_rot = path_rng.uniform(-spec.max_rotation, spec.max_rotation, 3)
            s = min_jerk_profile(steps)[:, None]
            seg_pos = pos + s * (new_pos - pos)
            seg_rot = rot + s * (new_rot - rot)
            seg = np.concatenate([seg_pos, seg_rot, np.full((steps, 1), grip)], axis=1)
            grip = 1.0 - grip
            seg[-1, GRIPPER] = grip
            rows.extend(seg)
            pos, rot = new_pos, new_rot
        actions = np.array(rows[:length])
        if spec.jitter_std > 0:
            actions[:, POSE_DIMS] += noise_rng.normal(0.0, spec.jitter_std, (length, 6))
        out.append(Trajectory(f"{spec.id_prefix}-{tag}-{spec.seed}-{i:06d}", tag, spec.rate_hz, actions))
    return out


# ---------------------------------------------------------------------------
# dataset mixing


@dataclass
class DatasetEntry:
    name: str
    source_tag: str
    weight: float = 1.0
    path: str | None = None
    trajectories: list[Trajectory] | None = field(default=None, repr=False)

    def load(self) -> list[Trajectory]:
        if self.trajectories is None:
            if self.path is None:
                raise ValueError(f"dataset {self.name!r} has neither a path nor trajectories")
            if not Path(self.path).exists():
                raise FileNotFoundError(f"dataset {self.name!r}: no such file {self.path}")
            self.trajectories = load_trajectories(self.path)
        return self.trajectories

    @property
    def trajectory_count(self) -> int:
        return len(self.load())


@dataclass
class DatasetManifest:
    entries: list[DatasetEntry]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("manifest has no datasets")
        w = [e.weight for e in self.entries]
        if any(x < 0 for x in w):
            raise ValueError("dataset weights must be non-negative")
        if not any(x > 0 for x in w):
            raise ValueError("at least one dataset weight must be positive")

    def source_tags(self) -> set[str]:
        return {e.source_tag for e in self.entries if e.weight > 0}


class ChunkPool:
    """Per-dataset normalized chunk arrays plus a weighted sampler."""

    def __init__(self, manifest: DatasetManifest, n: int, stride: int = 1, transform=None, trajectory_filter=None):
        self.manifest = manifest
        self.chunks: list[np.ndarray] = []
        self.tags: list[str] = []
        weights = []
        for e in manifest.entries:
            trajs = e.load()
            if trajectory_filter is not None:
                trajs = [t for t in trajs if trajectory_filter(t)]
            ch = chunk_trajectories(trajs, n, stride)
            if transform is not None and len(ch):
                ch = transform(ch)
            if e.weight > 0 and len(ch) == 0:
                raise ValueError(f"dataset {e.name!r} has positive weight but yields no chunks")
            self.chunks.append(ch)
            self.tags.append(e.source_tag)
            weights.append(e.weight)
        w = np.asarray(weights, dtype=np.float64)
        self.probs = w / w.sum()

    def sample(self, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(chunks, dataset_index)`` for ``count`` weighted draws."""
        src = rng.choice(len(self.chunks), size=count, p=self.probs)
        n, d = self.chunks[int(np.flatnonzero(self.probs)[0])].shape[1:]
        out = np.empty((count, n, d))
        for k in np.unique(src):
            sel = np.flatnonzero(src == k)
            pick = rng.integers(0, len(self.chunks[k]), size=sel.size)
            out[sel] = self.chunks[k][pick]
        return out, src


def mix_datasets(manifest: DatasetManifest, total_chunks: int, seed: int, n: int = DEFAULT_CHUNK, stride: int = 1):
    """Seeded stream of chunks drawn with probability proportional to weight.

    Returns ``(chunks, source_tags)``.
    """
    pool = ChunkPool(manifest, n, stride)
    chunks, src = pool.sample(total_chunks, np.random.default_rng(seed))
    return chunks, [pool.tags[i] for i in src]
