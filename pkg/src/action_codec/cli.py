"""``action-codec`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Logs are JSON
lines on stderr; human summaries go to stdout.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import codec, data, policy, training
from .autoencoder import ModelConfig

log = logging.getLogger("action_codec.cli")
SEED_ENV = "ACTION_CODEC_SEED"


class UsageError(Exception):
    """Bad configuration or arguments; maps to exit code 2."""


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        rec = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        rec.update(getattr(record, "fields", {}))
        return json.dumps(rec, sort_keys=True)


def _setup_logging(verbose: bool) -> None:
    root = logging.getLogger("action_codec")
    root.handlers[:] = []
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(_JsonFormatter())
    root.addHandler(h)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def _event(msg: str, **fields) -> None:
    log.info(msg, extra={"fields": fields})


def _env_seed(default: int) -> int:
    v = os.environ.get(SEED_ENV)
    if v is None or v == "":
        return default
    try:
        return int(v)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {v!r}") from None


# ---------------------------------------------------------------------------
# strict config parsing


def _strict(d, allowed: set[str], where: str) -> dict:
    if not isinstance(d, dict):
        raise UsageError(f"{where}: expected a JSON object")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise UsageError(f"{where}: unknown key(s) {', '.join(unknown)}")
    return d


def _fields_of(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


TRAIN_KEYS = _fields_of(training.TrainConfig) - {"schedule", "seed", "steps"}
RUN_KEYS = {"seed", "model", "train", "stages", "output", "eval"}


def _model_config(d: dict | None, where: str) -> ModelConfig:
    d = _strict(d or {}, _fields_of(ModelConfig), where)
    try:
        return ModelConfig(**d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{where}: {exc}") from None


@dataclasses.dataclass
class RunConfig:
    seed: int
    model: ModelConfig
    train: training.TrainConfig
    checkpoint_path: Path
    eval_path: Path | None
    eval_max_chunks: int


def load_run_config(path: str | Path) -> RunConfig:
    """Parse a training config; every object rejects unknown keys.

    Layout::

        {"seed": 0,
         "model": {ModelConfig fields},
         "train": {TrainConfig fields other than steps/seed/schedule},
         "stages": [{"name": "...", "steps": 500,
                     "datasets": [{"name": "...", "source_tag": "...", "weight": 1.0, "path": "..."}]}],
         "output": {"checkpoint": "model.avq", "eval": "eval.json"},
         "eval": {"max_chunks": 20000}}

    Relative dataset and output paths resolve against the config's folder.
    """
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    raw = _strict(raw, RUN_KEYS, "config")
    base = path.parent
    seed = _env_seed(int(raw.get("seed", 0)))
    model = _model_config(raw.get("model"), "config.model")
    tr = _strict(raw.get("train", {}), TRAIN_KEYS, "config.train")
    stages = []
    for i, st in enumerate(raw.get("stages", [])):
        st = _strict(st, {"name", "steps", "datasets"}, f"config.stages[{i}]")
        entries = []
        for j, ds in enumerate(st.get("datasets", [])):
            ds = _strict(ds, {"name", "source_tag", "weight", "path"}, f"config.stages[{i}].datasets[{j}]")
            if "path" not in ds:
                raise UsageError(f"config.stages[{i}].datasets[{j}]: missing 'path'")
            p = Path(ds["path"])
            p = p if p.is_absolute() else base / p
            if not p.exists():
                raise UsageError(f"dataset path does not exist: {p}")
            entries.append(
                data.DatasetEntry(ds.get("name", p.stem), ds.get("source_tag", "synthetic-clean"), float(ds.get("weight", 1.0)), str(p))
            )
        try:
            manifest = data.DatasetManifest(entries)
        except ValueError as exc:
            raise UsageError(f"config.stages[{i}]: {exc}") from None
        stages.append(training.Stage(manifest, int(st.get("steps", 0)), st.get("name", f"stage{i}")))
    if not stages:
        raise UsageError("config: at least one stage with datasets is required")
    out = _strict(raw.get("output", {}), {"checkpoint", "eval"}, "config.output")
    ev = _strict(raw.get("eval", {}), {"max_chunks"}, "config.eval")
    ckpt_path = Path(out.get("checkpoint", "model.avq"))
    ckpt_path = ckpt_path if ckpt_path.is_absolute() else base / ckpt_path
    eval_path = out.get("eval")
    if eval_path is not None:
        eval_path = Path(eval_path)
        eval_path = eval_path if eval_path.is_absolute() else base / eval_path
    if tr.get("checkpoint_dir"):
        cd = Path(tr["checkpoint_dir"])
        tr["checkpoint_dir"] = str(cd if cd.is_absolute() else base / cd)
    try:
        tcfg = training.TrainConfig(steps=sum(s.steps for s in stages), seed=seed, schedule=stages, **tr)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config.train: {exc}") from None
    return RunConfig(seed, model, tcfg, ckpt_path, eval_path, int(ev.get("max_chunks", 20000)))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else _env_seed(0)
    spec = data.SyntheticSpec(
        count=args.count, mean_length=args.mean_length, jitter_std=args.jitter, seed=seed, source_tag=args.source_tag
    )
    trajs = data.generate_synthetic(spec)
    data.save_trajectories(trajs, args.out)
    chunks = sum(max(0, len(t) - data.DEFAULT_CHUNK + 1) for t in trajs)
    _event("gen-data", out=str(args.out), trajectories=len(trajs), chunks=chunks, seed=seed)
    print(f"wrote {len(trajs)} trajectories ({chunks} chunks at n={data.DEFAULT_CHUNK}) to {args.out}")
    return 0


def _heldout_eval(ckpt, cfg: RunConfig):
    trajs = [t for st in cfg.train.schedule for e in st.manifest.entries for t in e.load()]
    try:
        return training.evaluate(ckpt, trajs, max_chunks=cfg.eval_max_chunks)
    except ValueError as exc:
        _event("eval skipped", reason=str(exc))
        return None


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)

    def on_step(step, lb):
        if step % max(1, args.log_every) == 0:
            _event("step", step=step, loss=lb.total, rec=lb.rec)

    t0 = time.perf_counter()
    try:
        ckpt = training.train(cfg.train, cfg.model, on_step=on_step)
    except training.TrainingAborted as exc:
        bad = cfg.checkpoint_path.with_suffix(".last_good.avq")
        training.save_checkpoint(exc.last_good, bad)
        _event("aborted", error=str(exc), last_good=str(bad))
        print(f"training aborted: {exc}; last good checkpoint at {bad}", file=sys.stderr)
        return 1
    report = _heldout_eval(ckpt, cfg)
    if report is not None:
        ckpt.history["heldout_mse"] = report.overall_mse
        ckpt.history["heldout_mse_bound"] = report.mse_bound
    cfg.checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
    training.save_checkpoint(ckpt, cfg.checkpoint_path)
    rep = report.to_dict() if report is not None else None
    if cfg.eval_path is not None:
        cfg.eval_path.write_text(json.dumps(rep, indent=1, sort_keys=True) + "\n")
    _event("train done", checkpoint=str(cfg.checkpoint_path), hash=ckpt.hash, steps=ckpt.step, seconds=time.perf_counter() - t0)
    print(f"checkpoint {cfg.checkpoint_path} (hash {ckpt.hash}, {ckpt.step} steps)")
    print(json.dumps(rep, sort_keys=True))
    return 0


def _load_ckpt(path) -> training.Checkpoint:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"checkpoint not found: {p}")
    return training.load_checkpoint(p)


def _bin_stats(args) -> data.NormalizationStats:
    if args.stats:
        p = Path(args.stats)
        if not p.exists():
            raise UsageError(f"stats file not found: {p}")
        return data.NormalizationStats.from_dict(json.loads(p.read_text()))
    if args.checkpoint:
        return _load_ckpt(args.checkpoint).stats
    raise UsageError("--scheme bin needs --stats or --checkpoint for its percentile bounds")


def _padded_chunks(actions: np.ndarray, n: int) -> np.ndarray:
    """Non-overlapping chunks; the last is padded by holding the final action."""
    T = actions.shape[0]
    count = -(-T // n)
    pad = count * n - T
    a = np.concatenate([actions, np.repeat(actions[-1:], pad, axis=0)]) if pad else actions
    return a.reshape(count, n, data.ACTION_DIM)


def cmd_encode(args) -> int:
    inp = Path(args.inp)
    if not inp.exists():
        raise UsageError(f"input file not found: {inp}")
    text = inp.read_text()
    if not text.strip():
        Path(args.out).write_text("")
        print("empty input; wrote empty output")
        return 0
    trajs = data.load_trajectories(inp)
    if args.scheme == "vq":
        ckpt = _load_ckpt(args.checkpoint) if args.checkpoint else None
        if ckpt is None:
            raise UsageError("--scheme vq needs --checkpoint")
        tok = codec.VQTokenizer(ckpt)
        n, ref, stats = tok.n, tok.model_ref, tok.stats
    else:
        stats = _bin_stats(args)
        n, ref, tok = args.chunk, "none", None
    rows, groups, errs = [], [], []
    for t in trajs:
        chunks = _padded_chunks(t.actions, n)
        if tok is not None:
            toks = tok.encode(chunks)
            recon = tok.decode(toks)
        else:
            toks = codec.bin_indices(chunks, stats).reshape(len(chunks), -1)
            recon = codec.bin_centers(toks.reshape(len(chunks), n, -1), stats)
        rows.extend(toks.tolist())
        groups.append(({"id": t.id, "source_tag": t.source_tag, "rate_hz": t.rate_hz, "length": len(t)}, len(chunks)))
        errs.append(data.normalize(recon.reshape(-1, 7)[: len(t)], stats) - data.normalize(t.actions, stats))
    tpc = len(rows[0]) if rows else 0
    Path(args.out).write_text(codec.format_token_stream(rows, args.scheme, tpc, ref, groups))
    mse = float(np.mean(np.concatenate(errs) ** 2))
    hist = ckpt.history if args.scheme == "vq" else {}
    bound = hist.get("heldout_mse_bound")
    if bound is None:
        bound = hist.get("heldout_mse")
    _event("encode", chunks=len(rows), roundtrip_mse=mse, heldout_bound=bound)
    msg = f"encoded {len(trajs)} trajectories into {len(rows)} chunks; round-trip mse (normalized) {mse:.6g}"
    if bound is not None:
        msg += f"; checkpoint heldout bound {bound:.6g}"
        if mse >= bound:
            msg += " (exceeded)"
    print(msg)
    return 0


def cmd_decode(args) -> int:
    inp = Path(args.inp)
    if not inp.exists():
        raise UsageError(f"input file not found: {inp}")
    header, groups = codec.parse_token_groups(inp.read_text())
    if not groups:
        Path(args.out).write_text("")
        print("empty input; wrote empty output")
        return 0
    scheme = header.get("scheme", args.scheme)
    if scheme != args.scheme:
        raise UsageError(f"token file was written with scheme {scheme}, --scheme says {args.scheme}")
    if scheme == "vq":
        if not args.checkpoint:
            raise UsageError("--scheme vq needs --checkpoint")
        tok = codec.VQTokenizer(_load_ckpt(args.checkpoint))
        if header.get("checkpoint", tok.model_ref) != tok.model_ref:
            raise codec.ModelMismatchError(
                f"tokens were produced by checkpoint {header['checkpoint']}, decoding with {tok.model_ref}"
            )
    else:
        stats = _bin_stats(args)
    out = []
    for gi, (meta, rows) in enumerate(groups):
        chunks = []
        for lineno, row in rows:
            try:
                if scheme == "vq":
                    chunks.append(tok.decode(codec.TokenChunk(tuple(row), tok.model_ref).tokens))
                else:
                    chunks.append(codec.bin_decode(codec.BinTokenSeq(tuple(row)), stats))
            except (codec.TokenRangeError, ValueError) as exc:
                raise codec.TokenRangeError(f"line {lineno}: {exc}") from None
        acts = np.concatenate(chunks)
        if "length" in meta:
            acts = acts[: int(meta["length"])]
        out.append(
            data.Trajectory(
                meta.get("id", f"decoded-{gi:06d}"), meta.get("source_tag", "synthetic-clean"), float(meta.get("rate_hz", 20.0)), acts
            )
        )
    data.save_trajectories(out, args.out)
    _event("decode", trajectories=len(out))
    print(f"decoded {sum(len(r) for _, r in groups)} chunks into {len(out)} trajectories")
    return 0


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    trajs = []
    for p in args.data:
        if not Path(p).exists():
            raise UsageError(f"dataset path does not exist: {p}")
        trajs.extend(data.load_trajectories(p))
    report = training.evaluate(ckpt, trajs, max_chunks=args.max_chunks, enforce_split=not args.all)
    js = json.dumps(report.to_dict(), sort_keys=True)
    if args.out:
        Path(args.out).write_text(js + "\n")
    print(js)
    return 0


def cmd_bench(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    ckpt = _load_ckpt(args.checkpoint)
    pcfg = policy.PolicyConfig(seed=args.seed if args.seed is not None else _env_seed(0))
    vq = policy.PolicyModel(policy.VQScheme(codec.VQTokenizer(ckpt)), pcfg)
    bn = policy.PolicyModel(policy.BinScheme(ckpt.stats, 1), pcfg)
    res = policy.throughput_ratio(vq, bn, args.trials, args.runs)
    res["tokens_per_chunk"] = codec.tokens_per_action_ratio(ckpt.model_config.n, 7, ckpt.model_config.num_quantizers)
    res["reference_ratio"] = codec.REFERENCE_SPEEDUP
    js = json.dumps(res, sort_keys=True)
    if args.out:
        Path(args.out).write_text(js + "\n")
    print(js)
    return 0


SCALING_KEYS = {"model", "steps", "batch_size", "lr", "seed", "heldout_chunks", "data"}


def cmd_scaling(args) -> int:
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sizes must be comma-separated integers, got {args.sizes!r}") from None
    if not sizes:
        raise UsageError("--sizes is empty")
    if any(b <= a for a, b in zip(sizes, sizes[1:])) or sizes[0] < 1:
        raise UsageError(f"--sizes must be positive and strictly increasing, got {args.sizes!r}")
    raw = {}
    if args.config:
        p = Path(args.config)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        raw = _strict(json.loads(p.read_text()), SCALING_KEYS, "scaling config")
    model = _model_config(raw.get("model"), "scaling config.model")
    spec_fields = _fields_of(data.SyntheticSpec) - {"count", "seed", "id_prefix"}
    dspec = _strict(raw.get("data", {}), spec_fields, "scaling config.data")
    seed = _env_seed(int(raw.get("seed", 0)))
    spec = data.SyntheticSpec(count=64, seed=seed, **{"mean_length": training.SCALING_MEAN_LENGTH, **dspec})
    rows = training.scaling_experiment(
        sizes,
        model,
        steps=int(raw.get("steps", 3000)),
        batch_size=int(raw.get("batch_size", 256)),
        seed=seed,
        lr=float(raw.get("lr", 1e-3)),
        heldout_chunks=int(raw.get("heldout_chunks", 5000)),
        data_spec=spec,
        csv_path=args.out,
        plot_path=args.plot,
    )
    for r in rows:
        print(f"train_size={r.train_size} heldout_mse={r.heldout_mse:.6g} utilization={r.utilization:.3f} perplexity={r.perplexity:.1f}")
    return 0


def cmd_demo_policy(args) -> int:
    names = []
    for s in args.scheme:
        names.extend(x for x in s.split(",") if x)
    for n in names:
        if n not in ("vq", "bin", "bin-chunk"):
            raise UsageError(f"unknown scheme {n!r}")
    if args.history < 1 or args.perturbed_copies < 0 or args.demos < 1:
        raise UsageError("--history and --demos must be >= 1, --perturbed-copies >= 0")
    seed = args.seed if args.seed is not None else _env_seed(0)
    base = policy.ExperimentConfig()
    cfg = dataclasses.replace(
        base,
        demos=args.demos,
        eval_episodes=args.episodes,
        seed=seed,
        policy=dataclasses.replace(base.policy, steps=args.steps, history=args.history, seed=seed),
        tokenizer_steps=args.tokenizer_steps,
        perturbed_copies=args.perturbed_copies,
    )
    ckpt = _load_ckpt(args.checkpoint) if args.checkpoint else None
    res = policy.paired_experiment(cfg, tuple(names), ckpt)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    policy.write_reports_jsonl(out / "rollouts.jsonl", [r for v in res.values() for r in v["reports"]])
    policy.write_summary_csv(out / "summary.csv", [v["summary"] for v in res.values()])
    for name, v in res.items():
        s = v["summary"]
        print(f"{name}: success_rate={s.success_rate:.3f} mean_final_dist={s.mean_final_dist:.4f} tokens_per_action={s.tokens_per_action:g}")
    print(f"reports in {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="action-codec", description="Action chunk tokenizer toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug-level logs on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic trajectories as JSONL")
    g.add_argument("--count", type=int, required=True, help="number of trajectories")
    g.add_argument("--jitter", type=float, default=0.0, help="per-step pose noise std (default 0)")
    g.add_argument("--seed", type=int, default=None, help=f"RNG seed (default ${SEED_ENV} or 0)")
    g.add_argument("--mean-length", type=int, default=200, help="mean trajectory length (default 200)")
    g.add_argument("--source-tag", default=None, help="override the tag implied by --jitter")
    g.add_argument("--out", required=True, help="output JSONL path")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a tokenizer from a JSON config")
    t.add_argument("--config", required=True, help="JSON run config (unknown keys rejected)")
    t.add_argument("--log-every", type=int, default=100, help="log every N steps (default 100)")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("encode", cmd_encode, "trajectories to tokens"), ("decode", cmd_decode, "tokens to trajectories")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--checkpoint", default=None, help="tokenizer checkpoint (vq; also supplies bin stats)")
        c.add_argument("--stats", default=None, help="normalization stats JSON for --scheme bin")
        c.add_argument("--in", dest="inp", required=True, help="input file")
        c.add_argument("--out", required=True, help="output file")
        c.add_argument("--scheme", choices=("vq", "bin"), default="vq", help="token scheme (default vq)")
        c.add_argument("--chunk", type=int, default=data.DEFAULT_CHUNK, help="bin chunk length (default 5)")
        c.set_defaults(func=func)

    e = sub.add_parser("eval", help="heldout reconstruction report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", nargs="+", required=True, help="trajectory JSONL files")
    e.add_argument("--max-chunks", type=int, default=20000)
    e.add_argument("--all", action="store_true", help="ignore the heldout split and use every trajectory")
    e.add_argument("--out", default=None, help="also write the JSON report here")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="vq vs bin-per-step policy throughput")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--trials", type=int, default=200, help="timed decisions per run (default 200)")
    b.add_argument("--runs", type=int, default=5, help="repeated runs (default 5)")
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("scaling", help="heldout error vs training-set size")
    s.add_argument("--sizes", required=True, help="comma-separated chunk counts, increasing")
    s.add_argument("--config", default=None, help="JSON with model/steps/batch_size/lr/seed/heldout_chunks/data")
    s.add_argument("--out", default="scaling.csv", help="CSV path (default scaling.csv)")
    s.add_argument("--plot", default=None, help="optional JSON plot spec path")
    s.set_defaults(func=cmd_scaling)

    d = sub.add_parser("demo-policy", help="train and roll out toy policies per scheme")
    d.add_argument("--scheme", action="append", required=True, help="vq, bin or bin-chunk; repeat or comma-separate")
    exp = policy.ExperimentConfig()
    d.add_argument("--demos", type=int, default=exp.demos, help=f"scripted demonstrations (default {exp.demos})")
    d.add_argument("--perturbed-copies", type=int, default=exp.perturbed_copies,
                   help=f"noise-injected replays per demo (default {exp.perturbed_copies})")
    d.add_argument("--episodes", type=int, default=exp.eval_episodes, help=f"evaluation episodes (default {exp.eval_episodes})")
    d.add_argument("--steps", type=int, default=exp.policy.steps, help=f"policy training steps (default {exp.policy.steps})")
    d.add_argument("--history", type=int, default=exp.policy.history,
                   help=f"observation snapshots per decision (default {exp.policy.history})")
    d.add_argument("--tokenizer-steps", type=int, default=exp.tokenizer_steps,
                   help=f"steps when fitting a tokenizer on the demos (default {exp.tokenizer_steps})")
    d.add_argument("--checkpoint", default=None, help="use this tokenizer instead of fitting one on the demos")
    d.add_argument("--seed", type=int, default=None)
    d.add_argument("--out-dir", default="policy_out")
    d.set_defaults(func=cmd_demo_policy)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"action-codec {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, training.CheckpointError, FloatingPointError) as exc:
        print(f"action-codec {args.command}: {exc}", file=sys.stderr)
        _event("failed", error=str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
