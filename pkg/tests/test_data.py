import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from action_codec import data
from action_codec.data import (
    DatasetEntry,
    DatasetManifest,
    NormalizationStats,
    SyntheticSpec,
    Trajectory,
    TrajectoryFormatError,
)


def _traj(actions, tid="t0", tag="sim"):
    return Trajectory(tid, tag, 20.0, np.asarray(actions, dtype=float))


def _write(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


# -- JSONL -----------------------------------------------------------------


def test_load_two_trajectories(tmp_path):
    p = tmp_path / "t.jsonl"
    rows = [[0, 0, 0, 0, 0, 0, 1]] * 3
    _write(p, [{"id": "a", "source": "real", "rate_hz": 20, "actions": rows}, {"id": "b", "source": "sim", "rate_hz": 10, "actions": rows}])
    trajs = data.load_trajectories(p)
    assert [t.id for t in trajs] == ["a", "b"]
    assert trajs[1].rate_hz == 10.0


def test_six_component_row_is_rejected_with_line(tmp_path):
    p = tmp_path / "t.jsonl"
    good = {"id": "a", "source": "real", "rate_hz": 20, "actions": [[0] * 7]}
    bad = {"id": "b", "source": "real", "rate_hz": 20, "actions": [[0] * 7, [0] * 6]}
    _write(p, [good, bad])
    with pytest.raises(TrajectoryFormatError) as ei:
        data.load_trajectories(p)
    assert ei.value.line == 2
    assert "row 1" in str(ei.value) and "t.jsonl:2:" in str(ei.value)


def test_empty_file_and_bad_json(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("\n")
    with pytest.raises(TrajectoryFormatError):
        data.load_trajectories(p)
    p.write_text("{not json\n")
    with pytest.raises(TrajectoryFormatError, match="empty.jsonl:1:"):
        data.load_trajectories(p)


def test_unknown_source_tag(tmp_path):
    p = tmp_path / "t.jsonl"
    _write(p, [{"id": "a", "source": "video", "rate_hz": 20, "actions": [[0] * 7]}])
    with pytest.raises(TrajectoryFormatError, match="source"):
        data.load_trajectories(p)


def test_save_load_round_trip_is_exact(tmp_path):
    trajs = data.generate_synthetic(SyntheticSpec(count=3, mean_length=60, jitter_std=0.01, seed=4))
    p = tmp_path / "rt.jsonl"
    data.save_trajectories(trajs, p)
    back = data.load_trajectories(p)
    for a, b in zip(trajs, back):
        assert (a.id, a.source_tag, a.rate_hz) == (b.id, b.source_tag, b.rate_hz)
        np.testing.assert_array_equal(a.actions, b.actions)


def test_gripper_is_clamped():
    t = _traj([[0, 0, 0, 0, 0, 0, 1.7], [0, 0, 0, 0, 0, 0, -0.2]])
    np.testing.assert_array_equal(t.actions[:, 6], [1.0, 0.0])


# -- no-op filter ------------------------------------------------------------


def test_identical_actions_collapse_to_one():
    t = _traj(np.tile([0.1, 0.2, 0.3, 0, 0, 0, 1], (10, 1)))
    assert len(data.filter_noops(t)) == 1


def test_zero_thresholds_keep_everything():
    t = _traj(np.tile([0.1, 0.2, 0.3, 0, 0, 0, 1], (10, 1)))
    assert len(data.filter_noops(t, 0.0, 0.0)) == 10


def brute_force_keep(a, eps_pos, eps_rot):
    """Search every subset for the unique self-consistent kept set."""
    T = len(a)

    def noop(i, j):
        return (
            np.linalg.norm(a[j, :3] - a[i, :3]) < eps_pos
            and np.linalg.norm(a[j, 3:6] - a[i, 3:6]) < eps_rot
            and a[j, 6] == a[i, 6]
        )

    found = []
    for mask in itertools.product([0, 1], repeat=T - 1):
        kept = [0] + [t for t in range(1, T) if mask[t - 1]]
        ok = True
        for t in range(1, T):
            last = max(k for k in kept if k < t)
            if (t in kept) == noop(last, t):
                ok = False
                break
        if ok:
            found.append(kept)
    assert len(found) == 1
    return found[0]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.integers(1, 9))
def test_filter_matches_brute_force(seed, T):
    rng = np.random.default_rng(seed)
    steps = rng.choice([0.0, 5e-5, 3e-4], size=(T, 1)) * rng.normal(size=(T, 6))
    a = np.cumsum(np.concatenate([steps, np.zeros((T, 1))], axis=1), axis=0)
    a[:, 6] = rng.choice([0.0, 1.0], p=[0.8, 0.2], size=T)
    t = _traj(a)
    kept = brute_force_keep(t.actions, 1e-4, 1e-3)
    np.testing.assert_array_equal(data.filter_noops(t).actions, t.actions[kept])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.integers(1, 40))
def test_filter_is_idempotent(seed, T):
    rng = np.random.default_rng(seed)
    a = np.cumsum(rng.normal(scale=1e-4, size=(T, 7)), axis=0)
    a[:, 6] = (rng.random(T) < 0.1).astype(float)
    once = data.filter_noops(_traj(a))
    twice = data.filter_noops(once)
    np.testing.assert_array_equal(once.actions, twice.actions)


def test_negative_threshold_rejected():
    with pytest.raises(ValueError):
        data.filter_noops(_traj(np.zeros((2, 7))), -1.0)


# -- statistics and normalization --------------------------------------------


def test_uniform_percentiles():
    rng = np.random.default_rng(0)
    a = rng.random((10_000, 7))
    s = data.compute_norm_stats([_traj(a)])
    srt = np.sort(a, axis=0)
    # sort-based oracle for linear interpolation at rank p*(N-1)
    for p, q in ((0.01, s.q01), (0.99, s.q99)):
        r = p * (len(a) - 1)
        lo = int(np.floor(r))
        oracle = srt[lo] + (r - lo) * (srt[lo + 1] - srt[lo])
        np.testing.assert_allclose(q, oracle, atol=1e-15)
    np.testing.assert_allclose(s.q01[:6], 0.01, atol=0.005)
    np.testing.assert_allclose(s.q99[:6], 0.99, atol=0.005)
    assert s.count == 10_000


def test_constant_dimension_is_widened():
    a = np.zeros((200, 7))
    a[:, 0] = np.linspace(0, 1, 200)
    s = data.compute_norm_stats([_traj(a)])
    assert s.q99[1] - s.q01[1] == pytest.approx(1e-6)
    assert np.all(s.q01 < s.q99)


def test_outlier_barely_moves_q99():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(10_000, 7))
    base = data.compute_norm_stats([_traj(a)]).q99[0]
    a[0, 0] = 1e6
    moved = data.compute_norm_stats([_traj(a)]).q99[0]
    assert abs(moved - base) < 0.01
    assert a[:, 0].max() - base > 1e5


def test_too_few_samples():
    with pytest.raises(ValueError, match="100"):
        data.compute_norm_stats([_traj(np.zeros((50, 7)))])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_stats_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    trajs = [_traj(rng.normal(size=(int(rng.integers(10, 60)), 7)), f"t{i}") for i in range(8)]
    a = data.compute_norm_stats(trajs)
    b = data.compute_norm_stats([trajs[i] for i in rng.permutation(8)])
    np.testing.assert_array_equal(a.q01, b.q01)
    np.testing.assert_array_equal(a.q99, b.q99)


STATS = NormalizationStats(np.full(7, -0.3), np.full(7, 0.5), 1000)


def test_normalize_endpoints_and_midpoint():
    x = np.stack([STATS.q01, STATS.q99, (STATS.q01 + STATS.q99) / 2])
    np.testing.assert_allclose(data.normalize(x, STATS), [[-1] * 7, [1] * 7, [0] * 7], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=7, max_size=7))
def test_normalize_round_trip(vals):
    x = np.array(vals)
    back = data.denormalize(data.normalize(x, STATS), STATS)
    np.testing.assert_allclose(back, np.clip(x, STATS.q01, STATS.q99), atol=1e-12, rtol=0)


def test_stats_dict_round_trip():
    d = json.loads(json.dumps(STATS.to_dict()))
    s = NormalizationStats.from_dict(d)
    np.testing.assert_array_equal(s.q01, STATS.q01)


# -- chunking and split ---------------------------------------------------------


@pytest.mark.parametrize("T,expected", [(5, 1), (9, 5), (4, 0)])
def test_chunk_counts(T, expected):
    assert len(data.chunk_trajectories([_traj(np.zeros((T, 7)))], 5, 1)) == expected


def test_chunk_contents_and_stride():
    a = np.arange(9 * 7, dtype=float).reshape(9, 7) / 100
    c = data.chunk_trajectories([_traj(a)], 5, 2)
    assert c.shape == (3, 5, 7)
    np.testing.assert_array_equal(c[1], a[2:7])


def test_heldout_split_is_hash_based():
    ids = [f"traj-{i}" for i in range(2000)]
    held = [i for i in ids if data.is_heldout(i)]
    assert 40 <= len(held) <= 170
    assert all(data.is_heldout(i) for i in held)


# -- synthetic generator -------------------------------------------------------


def test_generator_is_deterministic():
    a = data.generate_synthetic(SyntheticSpec(count=4, seed=9, jitter_std=0.01))
    b = data.generate_synthetic(SyntheticSpec(count=4, seed=9, jitter_std=0.01))
    for x, y in zip(a, b):
        assert x.id == y.id
        np.testing.assert_array_equal(x.actions, y.actions)


def test_min_jerk_segment_third_difference():
    # unit move over the shortest allowed segment, including both junctions
    for steps in (40, 57, 80):
        s = np.concatenate([[0.0], data.min_jerk_profile(steps), np.ones(3)])
        assert np.abs(np.diff(s, n=3)).max() < 1e-3


def test_clean_data_jerk_is_small():
    spec = SyntheticSpec(count=20, seed=2)
    # largest possible segment amplitude per pose dimension
    amplitude = np.array([spec.workspace] * 3 + [2 * spec.max_rotation] * 3)
    for t in data.generate_synthetic(spec):
        jerk = np.abs(np.diff(t.actions[:, :6], n=3, axis=0)).max(axis=0)
        assert np.all(jerk < 1e-3 * amplitude)


def test_jitter_noise_std():
    clean = data.generate_synthetic(SyntheticSpec(count=60, seed=5))
    noisy = data.generate_synthetic(SyntheticSpec(count=60, seed=5, jitter_std=0.01))
    diff = np.concatenate([n.actions[:, :3] - c.actions[:, :3] for c, n in zip(clean, noisy)])
    assert diff.shape[0] >= 10_000
    assert 0.008 <= diff.std() <= 0.012
    assert noisy[0].source_tag == "synthetic-jittery" and clean[0].source_tag == "synthetic-clean"


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_clean_smoother_than_jittery(seed):
    clean = data.generate_synthetic(SyntheticSpec(count=5, seed=seed))
    noisy = data.generate_synthetic(SyntheticSpec(count=5, seed=seed, jitter_std=0.01))
    assert np.mean([data.mean_jerk(t.actions) for t in clean]) < np.mean([data.mean_jerk(t.actions) for t in noisy])


# -- mixing ---------------------------------------------------------------------


def _entry(name, tag, weight, seed):
    trajs = data.generate_synthetic(SyntheticSpec(count=2, mean_length=50, seed=seed, source_tag=tag, id_prefix=name))
    return DatasetEntry(name, tag, weight, trajectories=trajs)


def test_single_dataset_stream():
    _, tags = data.mix_datasets(DatasetManifest([_entry("a", "sim", 1.0, 0)]), 100, seed=0)
    assert set(tags) == {"sim"}


def test_equal_weights_binomial_bound():
    m = DatasetManifest([_entry("a", "sim", 1.0, 0), _entry("b", "real", 1.0, 1)])
    _, tags = data.mix_datasets(m, 10_000, seed=3)
    assert abs(tags.count("sim") - 5000) <= 300


def test_zero_weight_never_sampled():
    m = DatasetManifest([_entry("a", "sim", 1.0, 0), _entry("b", "real", 0.0, 1)])
    _, tags = data.mix_datasets(m, 2000, seed=3)
    assert "real" not in tags


def test_manifest_validation(tmp_path):
    with pytest.raises(ValueError):
        DatasetManifest([_entry("a", "sim", 0.0, 0)])
    with pytest.raises(ValueError):
        DatasetManifest([_entry("a", "sim", -1.0, 0)])
    missing = DatasetEntry("x", "sim", 1.0, path=str(tmp_path / "nope.jsonl"))
    with pytest.raises(FileNotFoundError, match="nope.jsonl"):
        missing.load()
