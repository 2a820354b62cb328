"""Toy downstream harness: a kinematic pick-place world, a scripted
demonstrator, and a small autoregressive token policy.

The policy is a 2-layer MLP that predicts one token at a time from the
observation, the token position, and embeddings of the tokens it already
emitted for the current decision. Three token schemes plug into it:

========== ============== ================= ================
scheme     tokens/decide  actions/decide    alphabet
========== ============== ================= ================
vq         N_q (7)        n (5)             layer-restricted 256
bin        7              1                 256
bin-chunk  n * 7 (35)     n (5)             256
========== ============== ================= ================

Actions given to the tokenizers are expressed relative to the end-effector
pose at decision time (gripper stays absolute); the environment itself takes
absolute targets.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .codec import NUM_BINS, VQTokenizer, bin_centers, bin_indices
from .data import (
    ACTION_DIM,
    GRIPPER,
    NormalizationStats,
    Trajectory,
    filter_noops,
    min_jerk_profile,
    stats_from_actions,
)

WORKSPACE_HALF = 0.25
POS_CAP = 0.05
ROT_CAP = 0.2
GRASP_RADIUS = 0.02
SUCCESS_RADIUS = 0.03
DEFAULT_HORIZON = 100
DEMO_SPEED = 0.8  # scripted peak speed as a fraction of the per-step caps
MIN_SEPARATION = 0.08
OBS_SCALE = 1.0 / WORKSPACE_HALF
FINE_SCALE = 0.03  # metres; gain of the near-target observation features


# ---------------------------------------------------------------------------
# environment


@dataclass(frozen=True)
class ToyEnvState:
    """``objects[j]`` must end within the success radius of ``goals[j]``.

    ``attached`` is the index of the carried object or -1.
    """

    ee_pose: np.ndarray
    objects: np.ndarray
    goals: np.ndarray
    attached: int = -1
    step_count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ee_pose", np.array(self.ee_pose, dtype=np.float64).reshape(ACTION_DIM))
        object.__setattr__(self, "objects", np.array(self.objects, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "goals", np.array(self.goals, dtype=np.float64).reshape(-1, 3))
        if self.objects.shape != self.goals.shape:
            raise ValueError("need exactly one goal per object")
        for arr in (self.ee_pose[:3], self.objects, self.goals):
            if np.any(np.abs(arr) > WORKSPACE_HALF + 1e-12):
                raise ValueError("positions must lie inside the workspace cube")

    @classmethod
    def _unchecked(cls, ee_pose, objects, goals, attached, step_count) -> "ToyEnvState":
        # for env_step, whose outputs are in range by construction
        out = object.__new__(cls)
        for name, value in zip(("ee_pose", "objects", "goals", "attached", "step_count"), (ee_pose, objects, goals, attached, step_count)):
            object.__setattr__(out, name, value)
        return out

    @property
    def active(self) -> int:
        """Carried object, else the first one not yet at its goal, else the last."""
        if self.attached >= 0:
            return self.attached
        far = np.flatnonzero(goal_distances(self) >= SUCCESS_RADIUS)
        return int(far[0]) if far.size else self.objects.shape[0] - 1

    @property
    def object_pos(self) -> np.ndarray:
        return self.objects[self.active]

    @property
    def goal_pos(self) -> np.ndarray:
        return self.goals[self.active]


def goal_distances(state: ToyEnvState) -> np.ndarray:
    return np.linalg.norm(state.objects - state.goals, axis=1)


def final_goal_distance(state: ToyEnvState) -> float:
    """Worst object-to-goal distance; the episode succeeds when it is below the radius."""
    return float(goal_distances(state).max())


def is_success(state: ToyEnvState) -> bool:
    return final_goal_distance(state) < SUCCESS_RADIUS


def _capped(delta: np.ndarray, cap: float) -> np.ndarray:
    norm = math.sqrt(float(delta @ delta))
    return delta if norm <= cap else delta * (cap / norm)


def env_step(state: ToyEnvState, action) -> ToyEnvState:
    """Move toward the absolute target ``action`` under the per-step caps.

    The gripper value is applied directly; >= 0.5 means closed. Closing
    within the grasp radius of an object attaches the nearest one; opening
    releases it where it is.
    """
    a = np.asarray(action, dtype=np.float64).reshape(ACTION_DIM)
    target = a.copy()
    target[:3] = np.clip(target[:3], -WORKSPACE_HALF, WORKSPACE_HALF)
    target[GRIPPER] = np.clip(target[GRIPPER], 0.0, 1.0)
    pose = state.ee_pose.copy()
    pose[:3] = np.clip(pose[:3] + _capped(target[:3] - pose[:3], POS_CAP), -WORKSPACE_HALF, WORKSPACE_HALF)
    pose[3:6] = pose[3:6] + _capped(target[3:6] - pose[3:6], ROT_CAP)
    pose[GRIPPER] = target[GRIPPER]
    objects = state.objects.copy()
    attached = state.attached
    closed = pose[GRIPPER] >= 0.5
    if attached >= 0 and not closed:
        attached = -1
    elif attached < 0 and closed:
        d = np.linalg.norm(objects - pose[:3], axis=1)
        j = int(np.argmin(d))
        if d[j] <= GRASP_RADIUS:
            attached = j
    if attached >= 0:
        objects[attached] = pose[:3]
    return ToyEnvState._unchecked(pose, objects, state.goals, attached, state.step_count + 1)


def observe(history: list[ToyEnvState], h: int = 1) -> np.ndarray:
    """Flatten the last ``h`` snapshots (front-padded with the oldest).

    Each snapshot is the ee pose, the active object and its goal relative to
    the ee position (scaled to roughly unit range, plus a saturating
    high-gain copy that resolves the last few centimetres), and the attached
    flag: 20 floats.
    """
    if not history:
        raise ValueError("observation needs at least one state")
    snaps = list(history[-h:])
    snaps = [snaps[0]] * (h - len(snaps)) + snaps
    parts = []
    for s in snaps:
        p = s.ee_pose[:3]
        parts.append(
            np.concatenate(
                [
                    s.ee_pose[:3] * OBS_SCALE,
                    s.ee_pose[3:6],
                    [s.ee_pose[GRIPPER]],
                    (s.object_pos - p) * OBS_SCALE,
                    (s.goal_pos - p) * OBS_SCALE,
                    np.tanh((s.object_pos - p) / FINE_SCALE),
                    np.tanh((s.goal_pos - p) / FINE_SCALE),
                    [1.0 if s.attached >= 0 else 0.0],
                ]
            )
        )
    return np.concatenate(parts)


OBS_WIDTH = 20


# ---------------------------------------------------------------------------
# scripted demonstrations


@dataclass(frozen=True)
class EnvSpec:
    num_objects: int = 2
    horizon: int = DEFAULT_HORIZON
    object_extent: float = 0.15
    start_extent: float = 0.2
    max_rotation: float = 0.5


def sample_instance(spec: EnvSpec, rng: np.random.Generator) -> ToyEnvState:
    """Random start pose and well-separated object/goal positions."""
    pts: list[np.ndarray] = []
    while len(pts) < 2 * spec.num_objects:
        p = rng.uniform(-spec.object_extent, spec.object_extent, 3)
        if all(np.linalg.norm(p - q) >= MIN_SEPARATION for q in pts):
            pts.append(p)
    pose = np.zeros(ACTION_DIM)
    pose[:3] = rng.uniform(-spec.start_extent, spec.start_extent, 3)
    pose[3:6] = rng.uniform(-spec.max_rotation, spec.max_rotation, 3)
    m = spec.num_objects
    return ToyEnvState(pose, np.array(pts[:m]), np.array(pts[m:]))


def _leg(start: np.ndarray, end: np.ndarray, gripper: float) -> np.ndarray:
    """Minimum-jerk move whose peak per-step motion stays under the caps."""
    dpos = np.linalg.norm(end[:3] - start[:3])
    drot = np.linalg.norm(end[3:6] - start[3:6])
    peak = 1.875  # max of the min-jerk velocity profile, in units of distance / duration
    steps = int(max(np.ceil(peak * dpos / (DEMO_SPEED * POS_CAP)), np.ceil(peak * drot / (DEMO_SPEED * ROT_CAP)), 2))
    s = min_jerk_profile(steps)
    out = start[None, :] + s[:, None] * (end - start)[None, :]
    out[:, GRIPPER] = gripper
    return out


def scripted_actions(state: ToyEnvState) -> np.ndarray:
    """Absolute action sequence solving ``state``: per object reach, close, carry, open.

    The wrist returns to the neutral orientation during the first reach, so
    every target the demonstrator aims at is visible in the observation.
    """
    pose = state.ee_pose.copy()
    pose[GRIPPER] = 0.0
    rows = []
    for j in range(state.objects.shape[0]):
        for target_pos, grip_during, grip_after in ((state.objects[j], 0.0, 1.0), (state.goals[j], 1.0, 0.0)):
            end = pose.copy()
            end[:3] = target_pos
            end[3:6] = 0.0
            rows.append(_leg(pose, end, grip_during))
            settle = np.repeat(end[None], 2, axis=0)
            settle[:, GRIPPER] = grip_after
            rows.append(settle)
            pose = settle[-1].copy()
    return np.concatenate(rows, axis=0)


def replay(state: ToyEnvState, actions: np.ndarray) -> list[ToyEnvState]:
    """States visited when executing ``actions`` open loop, starting with ``state``."""
    states = [state]
    for a in actions:
        states.append(env_step(states[-1], a))
    return states


@dataclass
class Episode:
    initial: ToyEnvState
    trajectory: Trajectory  # targets actually executed
    labels: np.ndarray | None = None  # the demonstrator's intended targets, when they differ

    @property
    def targets(self) -> np.ndarray:
        return self.trajectory.actions if self.labels is None else self.labels


def collect_episodes(spec: EnvSpec, count: int, seed: int) -> list[Episode]:
    """Scripted demos on fresh random instances, no-op filtered.

    Instances the scripted controller cannot finish within the horizon are
    redrawn; every returned demo is verified to succeed open loop.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        init = sample_instance(spec, rng)
        actions = scripted_actions(init)
        traj = filter_noops(Trajectory(f"demo-{seed}-{len(out):04d}", "synthetic-clean", 20.0, actions))
        if traj.actions.shape[0] > spec.horizon:
            continue
        if not is_success(replay(init, traj.actions)[-1]):
            raise AssertionError("scripted controller failed on a sampled instance")
        out.append(Episode(init, traj))
    return out


def perturbed_episodes(
    episodes: list[Episode], copies: int, pos_std: float, rot_std: float, seed: int
) -> list[Episode]:
    """Noise-injected replays that teach recovery.

    Each copy executes the demo's targets plus Gaussian pose noise, while the
    labels stay the clean targets. Targets are absolute, so a decision taken
    off the demonstrated path is labelled with the chunk leading back onto it.
    Copies whose noisy replay fails are redrawn.
    """
    if copies < 0:
        raise ValueError("copies must be >= 0")
    rng = np.random.default_rng(seed)
    out = []
    for ep in episodes:
        clean = ep.targets
        made = 0
        while made < copies:
            noisy = clean.copy()
            noisy[:, 0:3] += rng.normal(0.0, pos_std, (len(clean), 3))
            noisy[:, 3:6] += rng.normal(0.0, rot_std, (len(clean), 3))
            if not is_success(replay(ep.initial, noisy)[-1]):
                continue
            traj = Trajectory(f"{ep.trajectory.id}-p{made}", ep.trajectory.source_tag, ep.trajectory.rate_hz, noisy)
            out.append(Episode(ep.initial, traj, clean))
            made += 1
    return out


def collect_demos(spec: EnvSpec, count: int, seed: int) -> list[Trajectory]:
    return [e.trajectory for e in collect_episodes(spec, count, seed)]


# ---------------------------------------------------------------------------
# token schemes


def relative_actions(actions: np.ndarray, decision_pose: np.ndarray) -> np.ndarray:
    rel = np.array(actions, dtype=np.float64)
    rel[..., :6] -= decision_pose[:6]
    return rel


def absolute_actions(rel: np.ndarray, decision_pose: np.ndarray) -> np.ndarray:
    out = np.array(rel, dtype=np.float64)
    out[..., :6] += decision_pose[:6]
    return out


class TokenScheme:
    """Maps a relative action block to per-position raw indices in ``[0, 256)``."""

    name: str
    tokens_per_decision: int
    actions_per_decision: int

    def raw_targets(self, rel_block: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decode_raw(self, raw: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def tokens(self, raw: np.ndarray) -> np.ndarray:
        """Emitted token IDs for raw head outputs."""
        return np.asarray(raw, dtype=np.int64)

    @property
    def tokens_per_action(self) -> float:
        return self.tokens_per_decision / self.actions_per_decision


class BinScheme(TokenScheme):
    """Per-scalar binning of ``actions_per_decision`` consecutive actions."""

    def __init__(self, stats: NormalizationStats, actions_per_decision: int = 1):
        self.stats = stats
        self.actions_per_decision = actions_per_decision
        self.tokens_per_decision = actions_per_decision * ACTION_DIM
        self.name = "bin" if actions_per_decision == 1 else "bin-chunk"

    def raw_targets(self, rel_block):
        return bin_indices(rel_block, self.stats).reshape(-1)

    def decode_raw(self, raw):
        return bin_centers(np.asarray(raw).reshape(-1, ACTION_DIM), self.stats)


class VQScheme(TokenScheme):
    name = "vq"

    def __init__(self, tokenizer: VQTokenizer):
        self.tokenizer = tokenizer
        self.tokens_per_decision = tokenizer.num_layers
        self.actions_per_decision = tokenizer.n

    def raw_targets(self, rel_block):
        t = self.tokenizer.encode(rel_block)
        return t - NUM_BINS * np.arange(t.shape[-1])

    def decode_raw(self, raw):
        return self.tokenizer.decode(self.tokens(raw))

    def tokens(self, raw):
        raw = np.asarray(raw, dtype=np.int64)
        return raw + NUM_BINS * np.arange(raw.shape[-1])


def decision_blocks(episodes: list[Episode], n: int, h: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Observation and relative ``(n, 7)`` action block at every demo step.

    States come from the executed targets, blocks from the intended ones.
    Blocks running past the end of a demo repeat its final action, which
    holds the pose.
    """
    obs, blocks = [], []
    for ep in episodes:
        states = replay(ep.initial, ep.trajectory.actions)
        acts = ep.targets
        padded = np.concatenate([acts, np.repeat(acts[-1:], n - 1, axis=0)], axis=0)
        for t in range(acts.shape[0]):
            obs.append(observe(states[: t + 1], h))
            blocks.append(relative_actions(padded[t : t + n], states[t].ee_pose))
    return np.array(obs), np.array(blocks)


def block_stats(episodes: list[Episode], n: int) -> NormalizationStats:
    return stats_from_actions(decision_blocks(episodes, n)[1])


# ---------------------------------------------------------------------------
# policy model


@dataclass
class PolicyConfig:
    hidden: int = 192
    token_embed: int = 16
    steps: int = 3000
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    head_init_scale: float = 1e-2
    history: int = 1  # observation snapshots per decision


class PolicyModel:
    """Feed-forward next-token predictor.

    Input for position ``p`` is the observation, a one-hot of ``p``, and the
    learned embeddings of the raw tokens at positions ``< p`` (zeros
    elsewhere). Two GELU hidden layers feed a 256-way head, so capacity is
    identical for every scheme with the same tokens per decision.
    """

    def __init__(self, scheme: TokenScheme, config: PolicyConfig = PolicyConfig()):
        if config.history < 1:
            raise ValueError("observation history must be >= 1")
        self.scheme = scheme
        self.config = config
        self.obs_width = obs_width = OBS_WIDTH * config.history
        L = scheme.tokens_per_decision
        H, E = config.hidden, config.token_embed
        rng = np.random.default_rng(config.seed)
        p = self.params = nx.ParamStore()

        def uni(name, shape, fan_in, scale=1.0):
            s = scale * np.sqrt(1.0 / fan_in)
            p.add(name, rng.uniform(-s, s, shape))

        fan = obs_width + L + L * E
        uni("in.obs", (H, obs_width), fan)
        uni("in.pos", (H, L), fan)
        uni("in.tok", (H, L * E), fan)
        uni("in.b", (H,), fan)
        uni("tok.table", (NUM_BINS, E), 1.0)
        uni("h1.w", (H, H), H)
        uni("h1.b", (H,), H)
        uni("head.w", (NUM_BINS, H), H, config.head_init_scale)
        p.add("head.b", np.zeros(NUM_BINS))

    def num_parameters(self) -> int:
        return self.params.num_parameters()

    # -- taped forward for training --------------------------------------

    def _rows(self, obs: np.ndarray, raw: np.ndarray):
        """Expand decisions to one row per token position (teacher forcing)."""
        D, L = raw.shape
        pos = np.tile(np.arange(L), D)
        obs_rows = np.repeat(obs, L, axis=0)
        prev = np.repeat(raw, L, axis=0)
        mask = (np.arange(L)[None, :] < pos[:, None]).astype(np.float64)
        return obs_rows, pos, prev, mask, raw.reshape(-1)

    def logits_var(self, obs_rows, pos, prev, mask) -> nx.Var:
        p = self.params
        R, L = prev.shape
        E = self.config.token_embed
        emb = nx.take_rows(p["tok.table"], prev.reshape(-1))
        emb = nx.mul(nx.reshape(emb, (R, L, E)), nx.Var(mask[:, :, None]))
        h = nx.linear(nx.Var(obs_rows), p["in.obs"], p["in.b"])
        h = nx.add(h, nx.linear(nx.Var(np.eye(L)[pos]), p["in.pos"]))
        h = nx.add(h, nx.linear(nx.reshape(emb, (R, L * E)), p["in.tok"]))
        h = nx.gelu(h)
        h = nx.gelu(nx.linear(h, p["h1.w"], p["h1.b"]))
        return nx.linear(h, p["head.w"], p["head.b"])

    def loss_var(self, obs: np.ndarray, raw: np.ndarray) -> tuple[nx.Var, float]:
        """Mean per-token cross-entropy and teacher-forced argmax accuracy."""
        obs_rows, pos, prev, mask, target = self._rows(obs, raw)
        logp = nx.log_softmax(self.logits_var(obs_rows, pos, prev, mask))
        acc = float((logp.value.argmax(axis=1) == target).mean())
        return nx.mul(nx.mean_all(nx.pick(logp, target)), -1.0), acc

    # -- fast inference ----------------------------------------------------

    def _inference_cache(self):
        P = self.params.params
        return (P["in.obs"], P["in.pos"], P["in.tok"], P["in.b"], P["tok.table"], P["h1.w"], P["h1.b"], P["head.w"], P["head.b"])

    def probabilities(self, obs: np.ndarray, prev_raw: np.ndarray, position: int) -> np.ndarray:
        """Next-token distribution over the 256-way raw alphabet."""
        logits = self._logits(obs, np.asarray(prev_raw, dtype=np.int64), position)
        z = np.exp(logits - logits.max())
        return z / z.sum()

    def _logits(self, obs, prev_raw, position):
        W_obs, W_pos, W_tok, b_in, table, W1, b1, Wh, bh = self._inference_cache()
        L = self.scheme.tokens_per_decision
        E = self.config.token_embed
        emb = np.zeros(L * E)
        if position:
            emb[: position * E] = table[prev_raw[:position]].reshape(-1)
        h = W_obs @ obs + W_pos[:, position] + W_tok @ emb + b_in
        h = nx.activation(h)
        h = nx.activation(W1 @ h + b1)
        return Wh @ h + bh

    def decide(self, obs: np.ndarray) -> np.ndarray:
        """Greedy autoregressive decoding of one decision's raw indices."""
        L = self.scheme.tokens_per_decision
        raw = np.zeros(L, dtype=np.int64)
        for i in range(L):
            raw[i] = int(np.argmax(self._logits(obs, raw, i)))
        return raw


# ---------------------------------------------------------------------------
# training


@dataclass
class PolicyTrainResult:
    model: PolicyModel
    losses: list[float]
    accuracy: float


def tokenize_demos(episodes: list[Episode], scheme: TokenScheme, h: int = 1) -> tuple[np.ndarray, np.ndarray]:
    n = max(scheme.actions_per_decision, 1)
    obs, blocks = decision_blocks(episodes, n, h)
    raw = np.stack([scheme.raw_targets(b[: scheme.actions_per_decision]) for b in blocks])
    return obs, raw


def train_policy(episodes: list[Episode], scheme: TokenScheme, config: PolicyConfig = PolicyConfig()) -> PolicyTrainResult:
    """Teacher-forced next-token cross-entropy with Adam."""
    obs, raw = tokenize_demos(episodes, scheme, config.history)
    model = PolicyModel(scheme, config)
    rng = np.random.default_rng(config.seed + 1)
    losses = []
    acc = 0.0
    for _ in range(config.steps):
        pick = rng.integers(0, obs.shape[0], size=min(config.batch_size, obs.shape[0]))
        with nx.Tape() as tape:
            loss, acc = model.loss_var(obs[pick], raw[pick])
        model.params.accumulate(tape.backward(loss, model.params))
        nx.adam_step(model.params, lr=config.lr)
        losses.append(float(loss.value))
    return PolicyTrainResult(model, losses, acc)


def policy_loss(model: PolicyModel, episodes: list[Episode]) -> tuple[float, float]:
    obs, raw = tokenize_demos(episodes, model.scheme, model.config.history)
    loss, acc = model.loss_var(obs, raw)
    return float(loss.value), acc


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutReport:
    scheme: str
    success: bool
    final_goal_distance: float
    steps_used: int
    decode_time: float
    tokens_emitted: int
    actions_executed: int
    decisions: int
    chunk_diversity: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d.pop("chunk_diversity")
        return d


def chunk_diversity(actions: np.ndarray) -> float:
    """Mean pairwise L2 distance between the actions of one chunk."""
    a = np.asarray(actions, dtype=np.float64)
    if a.shape[0] < 2:
        return 0.0
    d = np.linalg.norm(a[:, None, :] - a[None, :, :], axis=-1)
    iu = np.triu_indices(a.shape[0], 1)
    return float(d[iu].mean())


def rollout(model: PolicyModel, initial: ToyEnvState, horizon: int = DEFAULT_HORIZON) -> RolloutReport:
    """Closed-loop greedy rollout; every decoded action of a decision is executed.

    A new decision is only taken if all its actions fit in the remaining
    horizon, so tokens emitted always equal actions executed times tokens
    per action.
    """
    scheme = model.scheme
    history = [initial]
    state = initial
    decode_time = 0.0
    tokens = actions = decisions = 0
    diversity = []
    while actions + scheme.actions_per_decision <= horizon and not is_success(state):
        t0 = time.perf_counter()
        raw = model.decide(observe(history, model.config.history))
        rel = scheme.decode_raw(raw)
        decode_time += time.perf_counter() - t0
        block = absolute_actions(rel, state.ee_pose)
        if block.shape[0] > 1:
            diversity.append(chunk_diversity(block))
        for a in block:
            state = env_step(state, a)
            history.append(state)
        tokens += scheme.tokens_per_decision
        actions += block.shape[0]
        decisions += 1
    dist = final_goal_distance(state)
    return RolloutReport(scheme.name, dist < SUCCESS_RADIUS, dist, actions, decode_time, tokens, actions, decisions, diversity)


@dataclass
class SchemeSummary:
    scheme: str
    success_rate: float
    mean_final_dist: float
    actions_per_sec: float
    tokens_per_action: float
    mean_chunk_diversity: float | None = None

    def csv_row(self) -> list:
        return [self.scheme, self.success_rate, self.mean_final_dist, self.actions_per_sec, self.tokens_per_action]


SUMMARY_HEADER = ["scheme", "success_rate", "mean_final_dist", "actions_per_sec", "tokens_per_action"]


def evaluate_policy(model: PolicyModel, instances: list[ToyEnvState], horizon: int = DEFAULT_HORIZON):
    reports = [rollout(model, s, horizon) for s in instances]
    decode = sum(r.decode_time for r in reports)
    acts = sum(r.actions_executed for r in reports)
    div = [d for r in reports for d in r.chunk_diversity]
    summary = SchemeSummary(
        model.scheme.name,
        float(np.mean([r.success for r in reports])),
        float(np.mean([r.final_goal_distance for r in reports])),
        acts / decode if decode > 0 else 0.0,
        model.scheme.tokens_per_action,
        float(np.mean(div)) if div else None,
    )
    return summary, reports


def heldout_instances(spec: EnvSpec, count: int, seed: int) -> list[ToyEnvState]:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    return [sample_instance(spec, rng) for _ in range(count)]


# ---------------------------------------------------------------------------
# throughput


def throughput_bench(model: PolicyModel, trials: int, instances: list[ToyEnvState] | None = None, warmup: int = 5) -> dict:
    """Decisions and actions per second of the observe-decide-decode-act loop.

    Runs ``trials`` decisions across episodes (restarting on success or
    horizon); the first ``warmup`` decisions are not timed.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if instances is None:
        instances = heldout_instances(EnvSpec(), 4, 0)
    scheme = model.scheme
    inst = iter(np.resize(np.arange(len(instances)), trials + warmup + 1000))
    state = instances[next(inst)]
    history = [state]
    elapsed = 0.0
    acts = 0
    for d in range(trials + warmup):
        if is_success(state) or len(history) - 1 + scheme.actions_per_decision > DEFAULT_HORIZON:
            state = instances[next(inst)]
            history = [state]
        t0 = time.perf_counter()
        block = absolute_actions(scheme.decode_raw(model.decide(observe(history, model.config.history))), state.ee_pose)
        for a in block:
            state = env_step(state, a)
            history.append(state)
        dt = time.perf_counter() - t0
        if d >= warmup:
            elapsed += dt
            acts += block.shape[0]
    return {"decisions_per_sec": trials / elapsed, "actions_per_sec": acts / elapsed}


def throughput_ratio(vq_model: PolicyModel, bin_model: PolicyModel, trials: int = 200, runs: int = 5) -> dict:
    """Repeated paired measurement; runs are interleaved so drift hits both."""
    vq, bn = [], []
    for _ in range(runs):
        vq.append(throughput_bench(vq_model, trials)["actions_per_sec"])
        bn.append(throughput_bench(bin_model, trials)["actions_per_sec"])
    ratios = np.array(vq) / np.array(bn)
    return {
        "vq_actions_per_sec": float(np.median(vq)),
        "bin_actions_per_sec": float(np.median(bn)),
        "ratio": float(np.median(ratios)),
        "ratios": ratios.tolist(),
        "vq_runs": vq,
        "bin_runs": bn,
        "spread": float((ratios.max() - ratios.min()) / np.median(ratios)),
    }


# ---------------------------------------------------------------------------
# experiments


def _experiment_policy() -> PolicyConfig:
    # two snapshots expose the demonstrator's velocity, which one pose does not determine
    return PolicyConfig(steps=6000, history=2)


@dataclass
class ExperimentConfig:
    demos: int = 200
    eval_episodes: int = 100
    seed: int = 0
    env: EnvSpec = field(default_factory=EnvSpec)
    policy: PolicyConfig = field(default_factory=_experiment_policy)
    tokenizer_steps: int = 8000
    tokenizer_batch: int = 256
    tokenizer_lr: float = 1e-3
    tokenizer_final_lr: float | None = 1e-5  # cosine decay target
    perturbed_copies: int = 4  # noise-injected replays per demo
    perturb_pos_std: float = 0.006
    perturb_rot_std: float = 0.03


def training_episodes(cfg: ExperimentConfig) -> list[Episode]:
    """The demos plus their noise-injected replays; shared by every scheme."""
    episodes = collect_episodes(cfg.env, cfg.demos, cfg.seed)
    extra = perturbed_episodes(episodes, cfg.perturbed_copies, cfg.perturb_pos_std, cfg.perturb_rot_std, cfg.seed + 1)
    return episodes + extra


def train_demo_tokenizer(episodes: list[Episode], cfg: ExperimentConfig, model_config=None):
    """Fit a VQ tokenizer on the demos' relative action chunks."""
    from .autoencoder import ActionVQVAE, ModelConfig
    from .data import normalize
    from .training import Trainer, checkpoint_from_model

    mc = model_config or ModelConfig()
    _, blocks = decision_blocks(episodes, mc.n)
    stats = stats_from_actions(blocks)
    model = ActionVQVAE(mc, seed=cfg.seed)
    trainer = Trainer(model, lr=cfg.tokenizer_lr, seed=cfg.seed)
    trainer.fit(normalize(blocks, stats), cfg.tokenizer_steps, cfg.tokenizer_batch, seed=cfg.seed, final_lr=cfg.tokenizer_final_lr)
    return checkpoint_from_model(model, stats, step=cfg.tokenizer_steps, seed=cfg.seed)


def build_schemes(episodes: list[Episode], cfg: ExperimentConfig, checkpoint=None, names=("vq", "bin")) -> dict:
    out = {}
    n = checkpoint.model_config.n if checkpoint is not None else 5
    for name in names:
        if name == "vq":
            ckpt = checkpoint if checkpoint is not None else train_demo_tokenizer(episodes, cfg)
            out[name] = VQScheme(VQTokenizer(ckpt))
        elif name == "bin":
            out[name] = BinScheme(block_stats(episodes, 1), 1)
        elif name == "bin-chunk":
            out[name] = BinScheme(block_stats(episodes, n), n)
        else:
            raise ValueError(f"unknown scheme {name!r}")
    return out


def paired_experiment(cfg: ExperimentConfig, names=("vq", "bin"), checkpoint=None) -> dict:
    """Train one policy per scheme on the same demos and budget, then roll
    each out on the same heldout instances."""
    episodes = training_episodes(cfg)
    schemes = build_schemes(episodes, cfg, checkpoint, names)
    instances = heldout_instances(cfg.env, cfg.eval_episodes, cfg.seed)
    results = {}
    for name, scheme in schemes.items():
        trained = train_policy(episodes, scheme, cfg.policy)
        summary, reports = evaluate_policy(trained.model, instances, cfg.env.horizon)
        results[name] = {"model": trained.model, "summary": summary, "reports": reports, "losses": trained.losses}
    return results


def ablation_autoregressive_chunk(cfg: ExperimentConfig, checkpoint=None) -> dict:
    """Binned 5-action chunks decoded token by token vs VQ chunk tokens."""
    res = paired_experiment(cfg, ("bin-chunk", "vq"), checkpoint)
    return {name: r["summary"] for name, r in res.items()}


def write_summary_csv(path, summaries) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_HEADER)
        for s in summaries:
            w.writerow(s.csv_row())


def write_reports_jsonl(path, reports) -> None:
    Path(path).write_text("".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in reports))


def with_steps(cfg: PolicyConfig, steps: int) -> PolicyConfig:
    return replace(cfg, steps=steps)
