"""Acceptance suite: one test per criterion, each printing a PASS/FAIL verdict.

Criteria 5 and 7 are experiments lasting tens of minutes; they carry the
``slow`` marker but run by default.
"""

import csv
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from action_codec import codec, rvq
from action_codec import numerics as nx
from action_codec import policy as P
from action_codec.autoencoder import ActionVQVAE, ModelConfig
from action_codec.codec import VQTokenizer
from action_codec.data import (
    DatasetEntry,
    DatasetManifest,
    NormalizationStats,
    SyntheticSpec,
    Trajectory,
    chunk_trajectories,
    compute_norm_stats,
    filter_noops,
    generate_synthetic,
    mean_jerk,
    normalize,
    stats_from_actions,
)
from action_codec.training import (
    Checkpoint,
    CheckpointChecksumError,
    Stage,
    TrainConfig,
    Trainer,
    checkpoint_from_model,
    embedding_ablation,
    load_checkpoint,
    overfit_oracle,
    save_checkpoint,
    scaling_experiment,
    synthetic_pool,
    first_chunks,
    train,
)

from conftest import record


def _verdict(number, ok, detail):
    record(number, bool(ok), detail)
    assert ok, detail


# 1 ---------------------------------------------------------------------------


def test_c01_gradients_match_central_differences():
    t0 = time.perf_counter()
    m = ActionVQVAE(ModelConfig(k=8, channels=(4, 8)), seed=1)
    chunks = np.random.default_rng(1).uniform(-1, 1, (4, 5, 7))
    rep = nx.finite_difference_check(lambda: m.training_loss(chunks).total_var, m.params, tolerance=1e-3, h=1e-5)
    elapsed = time.perf_counter() - t0
    name, worst = rep.worst()
    _verdict(
        1,
        rep.passed and elapsed < 120 and len(rep.max_rel_error) == len(m.params.names()),
        f"{m.num_parameters()} parameters, worst rel err {worst:.2e} ({name}), {elapsed:.1f}s",
    )


# 2 ---------------------------------------------------------------------------


def _exhaustive_rvq(x, books):
    """Independent oracle: explicit per-code differences, first index on ties."""
    r = x.copy()
    idx = np.empty((len(x), len(books)), dtype=np.int64)
    for i, codes in enumerate(books):
        for s in range(0, len(r), 500):
            block = r[s : s + 500]
            d = ((block[:, None, :] - codes[None, :, :]) ** 2).sum(-1)
            idx[s : s + 500, i] = d.argmin(axis=1)
        r = r - codes[idx[:, i]]
    return idx, r


def test_c02_rvq_algebra():
    rng = np.random.default_rng(2)
    k = 64
    worst_tel, mismatches = 0.0, 0
    for nq in (1, 3, 7):
        books = rvq.RvqCodebooks.random(nq, k, rng, scale=1.0)
        x = rng.normal(size=(10_000, k))
        res = rvq.quantize_residual(x, books)
        picked = sum(books.layers[i].codes[res.indices[:, i]] for i in range(nq))
        worst_tel = max(worst_tel, float(np.abs(x - picked - res.residuals[:, -1]).max()))
        oracle_idx, oracle_r = _exhaustive_rvq(x, [b.codes for b in books.layers])
        mismatches += int((oracle_idx != res.indices).sum())
        np.testing.assert_allclose(res.residuals[:, -1], oracle_r, atol=1e-12)
    _verdict(2, worst_tel < 1e-12 and mismatches == 0, f"telescoping max-norm {worst_tel:.1e}, {mismatches} index mismatches")


# 3 ---------------------------------------------------------------------------


def test_c03_token_ranges_partition():
    cfg = ModelConfig()
    trajs = generate_synthetic(SyntheticSpec(count=60, seed=3))
    stats = compute_norm_stats(trajs)
    chunks = chunk_trajectories(trajs, cfg.n, 1)[:10_000]
    m = ActionVQVAE(cfg, seed=3)
    Trainer(m, lr=1e-3, seed=3).fit(normalize(chunks, stats), 100, 64)
    tokens = VQTokenizer(checkpoint_from_model(m, stats)).encode(chunks)
    nq = cfg.num_quantizers
    inside = all(
        (tokens[:, i] >= 256 * i).all() and (tokens[:, i] <= 256 * i + 255).all() for i in range(nq)
    )
    tiles = np.concatenate([np.arange(lo, hi + 1) for lo, hi in map(codec.layer_range, range(nq))])
    exact = np.array_equal(tiles, np.arange(256 * nq))
    _verdict(3, len(tokens) == 10_000 and inside and exact, f"{len(tokens)} chunks, in range {inside}, tiling exact {exact}")


# 4 ---------------------------------------------------------------------------


def test_c04_overfit_one_chunk():
    t0 = time.perf_counter()
    res = overfit_oracle(ModelConfig(), max_steps=2000, tolerance=1e-3)
    elapsed = time.perf_counter() - t0
    _verdict(4, res.passed and elapsed < 300, f"mse {res.mse:.2e} after {res.steps} steps, {elapsed:.1f}s")


# 5 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c05_scaling_proxy(tmp_path):
    t0 = time.perf_counter()
    curves = {}
    for seed in (0, 1):
        rows = scaling_experiment(
            [1_000, 10_000, 100_000], ModelConfig(), 3000, 256, seed, csv_path=tmp_path / f"scaling{seed}.csv"
        )
        curves[seed] = [r.heldout_mse for r in rows]
    elapsed = time.perf_counter() - t0
    decreasing = all(all(b < a for a, b in zip(c, c[1:])) for c in curves.values())
    detail = "; ".join(f"seed {s}: " + " > ".join(f"{v:.5f}" for v in c) for s, c in curves.items())
    _verdict(5, decreasing and elapsed < 7200, f"{detail}; {elapsed / 60:.1f} min")


# 6 ---------------------------------------------------------------------------


def test_c06_speed_proxy():
    cfg = ModelConfig()
    rng = np.random.default_rng(6)
    stats = stats_from_actions(rng.uniform(-0.05, 0.05, (2000, 7)))
    ckpt = checkpoint_from_model(ActionVQVAE(cfg, seed=6), stats)
    chunk = rng.uniform(-0.05, 0.05, (cfg.n, cfg.d))
    vq_tokens = len(codec.vq_encode(chunk, ckpt).tokens)
    bin_tokens = len(codec.bin_encode(chunk, stats).tokens)
    vq_model = P.PolicyModel(P.VQScheme(VQTokenizer(ckpt)))
    bin_model = P.PolicyModel(P.BinScheme(stats, 1))
    a, b = vq_model.num_parameters(), bin_model.num_parameters()
    matched = abs(a - b) <= 0.01 * max(a, b)
    res = P.throughput_ratio(vq_model, bin_model, trials=500, runs=5)
    cv = max(np.std(r) / np.mean(r) for r in (res["vq_runs"], res["bin_runs"]))
    ok = vq_tokens == 7 and bin_tokens == 35 and matched and res["ratio"] >= 2.85 and cv < 0.2
    _verdict(
        6,
        ok,
        f"tokens {vq_tokens} vs {bin_tokens}, trunk {a} vs {b} params, "
        f"{res['vq_actions_per_sec']:.0f} vs {res['bin_actions_per_sec']:.0f} actions/s "
        f"(ratio {res['ratio']:.2f}), worst timing CV {cv:.1%}",
    )


# 7 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c07_cumulative_error_proxy(tmp_path):
    t0 = time.perf_counter()
    cfg = P.ExperimentConfig(eval_episodes=100)
    res = P.paired_experiment(cfg)
    P.write_summary_csv(tmp_path / "summary.csv", [r["summary"] for r in res.values()])
    P.write_reports_jsonl(tmp_path / "reports.jsonl", [x for r in res.values() for x in r["reports"]])
    elapsed = time.perf_counter() - t0
    vq, bn = res["vq"]["summary"], res["bin"]["summary"]
    emitted = len((tmp_path / "reports.jsonl").read_text().splitlines()) == 200
    with open(tmp_path / "summary.csv") as fh:
        emitted &= [r["scheme"] for r in csv.DictReader(fh)] == ["vq", "bin"]
    _verdict(
        7,
        vq.success_rate >= bn.success_rate and emitted and elapsed < 3600,
        f"success vq {vq.success_rate:.2f} vs bin {bn.success_rate:.2f} over 100 episodes, "
        f"mean final distance {vq.mean_final_dist:.3f} vs {bn.mean_final_dist:.3f}, {elapsed / 60:.1f} min",
    )


# 8 ---------------------------------------------------------------------------


def test_c08_embedding_ablation(tmp_path):
    cfg = ModelConfig()
    train_side, _ = synthetic_pool(5000, cfg.n, seed=8, spec=SyntheticSpec(count=1, mean_length=80, seed=8))
    stats = compute_norm_stats(train_side)
    chunks = normalize(first_chunks(train_side, 5000, cfg.n), stats)
    held = normalize(chunk_trajectories(generate_synthetic(SyntheticSpec(count=30, mean_length=80, seed=800)), cfg.n, 5), stats)
    path = tmp_path / "ablation.csv"
    rows = embedding_ablation(chunks, held, cfg, steps=500, batch_size=64, seed=8, csv_path=path)
    with open(path) as fh:
        table = list(csv.DictReader(fh))
    ok = (
        [r["embedding_enabled"] for r in table] == ["1", "0"]
        and all(np.isfinite(float(r["heldout_mse"])) for r in table)
        and all(r.converged for r in rows)
    )
    _verdict(
        8,
        ok,
        "heldout mse on {:.2e} / off {:.2e}; overfit oracle on {} / off {}".format(
            rows[0].heldout_mse, rows[1].heldout_mse, rows[0].converged, rows[1].converged
        ),
    )


# 9 ---------------------------------------------------------------------------


def test_c09_binning_error_bound():
    lo = np.array([-0.3, -1.0, 0.0, -2.0, 5.0, -0.01, 0.0])
    hi = np.array([0.2, 1.0, 1e-3, 3.0, 9.0, 0.01, 1.0])
    stats = NormalizationStats(lo, hi, 100)
    frac = np.concatenate([np.linspace(-0.25, 1.25, 30_001), [0.0, 1.0, -10.0, 10.0]])
    grid = lo + (hi - lo) * frac[:, None]
    dec = codec.bin_centers(codec.bin_indices(grid, stats), stats)
    err = np.abs(dec - np.clip(grid, lo, hi))
    ratio = (err / ((hi - lo) / 512)).max()
    _verdict(9, bool(np.all(err <= (hi - lo) / 512 * (1 + 1e-9))), f"{len(grid)} grid rows, worst error {ratio:.4f} of the bound")


# 10 --------------------------------------------------------------------------


def test_c10_determinism_and_persistence(tmp_path):
    trajs = generate_synthetic(SyntheticSpec(count=12, mean_length=60, seed=10, source_tag="sim"))
    manifest = DatasetManifest([DatasetEntry("sim", "sim", 1.0, trajectories=trajs)])

    def run():
        return train(TrainConfig(steps=20, batch_size=16, lr=1e-3, seed=10, schedule=[Stage(manifest, 20)]),
                     ModelConfig(k=8, channels=(4, 8), num_quantizers=3))

    a, b = run(), run()
    same = a.to_bytes() == b.to_bytes()
    save_checkpoint(a, tmp_path / "a.avq")
    round_trip = load_checkpoint(tmp_path / "a.avq").to_bytes() == a.to_bytes()
    blob = a.to_bytes()
    positions = np.unique(np.concatenate([[0, 5, 10, len(blob) - 1], np.random.default_rng(10).integers(0, len(blob), 60)]))
    detected = 0
    for pos in positions:
        bad = bytearray(blob)
        bad[pos] ^= 0x01
        try:
            Checkpoint.from_bytes(bytes(bad))
        except CheckpointChecksumError:
            detected += 1
    _verdict(
        10,
        same and round_trip and detected == len(positions),
        f"bit-identical {same}, round trip {round_trip}, corruption detected {detected}/{len(positions)}",
    )


# 11 --------------------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(-1, 1), min_size=7, max_size=7), min_size=1, max_size=40), st.integers(0, 3))
def test_c11_filter_noops_idempotent_property(rows, repeats):
    a = np.repeat(np.array(rows), repeats + 1, axis=0) * 0.01
    t = Trajectory("p", "sim", 20.0, a)
    once = filter_noops(t)
    np.testing.assert_array_equal(filter_noops(once).actions, once.actions)


def test_c11_data_hygiene():
    idempotent = True
    jerk_gap = True
    for seed in range(5):
        jittery = generate_synthetic(SyntheticSpec(count=8, jitter_std=0.002, seed=seed))
        clean = generate_synthetic(SyntheticSpec(count=8, seed=seed))
        for t in jittery + clean:
            once = filter_noops(t)
            idempotent &= np.array_equal(filter_noops(once).actions, once.actions)
        jerk_gap &= np.mean([mean_jerk(t.actions) for t in clean]) < np.mean([mean_jerk(t.actions) for t in jittery])
    trajs = generate_synthetic(SyntheticSpec(count=20, jitter_std=0.002, seed=11))
    base = compute_norm_stats(trajs)
    rng = np.random.default_rng(11)
    invariant = True
    for _ in range(5):
        shuffled = [Trajectory(t.id, t.source_tag, t.rate_hz, t.actions[rng.permutation(len(t))]) for t in trajs]
        shuffled = [shuffled[i] for i in rng.permutation(len(shuffled))]
        s = compute_norm_stats(shuffled)
        invariant &= np.array_equal(s.q01, base.q01) and np.array_equal(s.q99, base.q99)
    _verdict(
        11,
        idempotent and jerk_gap and invariant,
        f"filter_noops idempotent {idempotent}, clean jerk < jittery jerk {jerk_gap}, stats permutation-invariant {invariant}",
    )
