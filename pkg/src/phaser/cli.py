"""Command-line surface: extract | tune | analyze | generalize | report.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime
failure (scenario/backend/parse/checkpoint problems). Every tune and
generalize run writes a manifest.json next to its outputs; the file
formats are documented in docs/file_formats.md.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from .agents import PpoConfig
from .analysis import (MAX_DEPTH, MIN_SPLIT, N_TREES, build_dataset,
                       filter_by_importance, importance_matrix, train_forest,
                       write_importance_csv, write_importance_long_csv)
from .backends import SyntheticBackend
from .drivers import (greedy_rollout, train_dqn, train_pg, train_ppo,
                      train_vector_ppo)
from .env import PhaseEnv, VectorEnv
from .episode import EvalRecord, read_log, write_log
from .errors import (ConfigError, EmptyDataset, ParseError, PhaserError,
                     ScenarioError)
from .irfeatures import extract_features_from_text, write_feature_csv
from .mlp import load_checkpoint, save_checkpoint
from .runcfg import (RL_ENGINES, RunConfig, build_manifest, read_manifest,
                     write_manifest)
from .scenario import loads_scenario
from .search import (GaConfig, exhaustive, genetic, greedy_insert,
                     random_search)
from .util import geomean

SUMMARY_COLUMNS = ("program", "baseline_cycles", "best_cycles", "speedup",
                   "samples", "wall_ms")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage errors exit with code 1, not 2."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _utcnow():
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- extract -------------------------------------------------------------

def cmd_extract(args):
    rows = []
    for path in args.input:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise PhaserError(f"cannot read {path}: {exc}") from None
        try:
            rows.append((p.stem, extract_features_from_text(text)))
        except ParseError as exc:
            # keep line/column, prepend the offending file
            exc.args = (f"{path}: {exc.args[0]}",)
            raise
    write_feature_csv(args.out, rows)
    print(f"wrote {len(rows)} feature rows to {args.out}")
    return 0


# -- tune ----------------------------------------------------------------

def _resolve_run(cfg, scn):
    """Materialize scenario-provided defaults into cfg and check the
    engine/observation combination before anything runs."""
    n = cfg.n or scn.n
    if n < 1:
        raise ConfigError("n: not set and the scenario suggests no length")
    if cfg.stride > n:
        raise ConfigError(f"stride: {cfg.stride} exceeds n = {n}")
    cfg.n = n
    if not cfg.baseline:
        cfg.baseline = tuple(scn.baseline)
    names = cfg.programs or tuple(p.name for p in scn.programs)
    for name in names:
        try:
            scn.program(name)
        except ScenarioError as exc:
            raise ConfigError(f"programs: {exc}") from None
    cfg.programs = names
    if cfg.engine in ("exhaustive", "greedy", "genetic") and (
            cfg.budget_samples or cfg.budget_ms):
        raise ConfigError(
            f"budget: engine '{cfg.engine}' runs to completion; budgets "
            "apply to the random and RL engines")
    if cfg.engine in RL_ENGINES and cfg.budget_ms:
        raise ConfigError(
            "budget.wall_ms: only the random engine enforces a wall-clock "
            "budget; cap RL work with budget.samples or episodes")
    if cfg.engine == "ppo-multiaction":
        if len(names) != 1:
            raise ConfigError("programs: ppo-multiaction tunes one program")
        if cfg.reward == "geomean":
            raise ConfigError("reward: ppo-multiaction takes delta or log")
        if cfg.feature_mask:
            raise ConfigError("feature_mask: ppo-multiaction observes slot "
                              "positions, not features")
    elif cfg.engine in RL_ENGINES:
        if (len(names) > 1 and cfg.rotation == "joint"
                and cfg.reward != "geomean"):
            raise ConfigError(
                "reward: joint multi-program training needs reward = geomean")


def _rl_budget_episodes(cfg, per_episode):
    episodes = cfg.episodes
    if cfg.budget_samples:
        if cfg.budget_samples < per_episode:
            raise ConfigError(
                f"budget.samples: one episode costs {per_episode} samples")
        episodes = min(episodes, cfg.budget_samples // per_episode)
    return episodes


def _ppo_cfg(p):
    try:
        return PpoConfig(clip=p["clip"], epochs=p["epochs"],
                         minibatch=p["minibatch"], gamma=p["gamma"],
                         lr=p["lr"], value_coef=p["value_coef"],
                         entropy_coef=p["entropy_coef"])
    except PhaserError as exc:
        raise ConfigError(f"ppo: {exc}") from None


def _run_search_engine(cfg, backend, prog, registry):
    p = cfg.params
    if cfg.engine == "exhaustive":
        return exhaustive(backend, prog, registry, cfg.n, cap=p["cap"],
                          workers=cfg.workers)
    if cfg.engine == "random":
        return random_search(backend, prog, registry, cfg.n, seed=cfg.seed,
                             budget_samples=cfg.budget_samples or None,
                             budget_ms=cfg.budget_ms or None)
    if cfg.engine == "greedy":
        return greedy_insert(
            backend, prog, registry, cfg.n,
            continue_on_no_improve=p["continue_on_no_improve"],
            workers=cfg.workers)
    try:
        ga = GaConfig(population_size=p["population"],
                      generations=p["generations"],
                      tournament_size=p["tournament"],
                      crossover_rate=p["crossover"],
                      mutation_rate=p["mutation"],
                      elitism_count=p["elitism"])
    except PhaserError as exc:
        raise ConfigError(f"genetic: {exc}") from None
    return genetic(backend, prog, registry, cfg.n, ga, seed=cfg.seed,
                   workers=cfg.workers)


def _summary_row(backend, prog, baseline_seq, best_seq, samples, wall_ms):
    base = (backend.evaluate(prog, baseline_seq, count=False)
            if baseline_seq else backend.initial_cost(prog))
    best = backend.evaluate(prog, best_seq, count=False)
    speedup = base / best - 1.0
    return (prog.name, int(base), int(best), f"{speedup:.6f}",
            int(samples), f"{wall_ms:.1f}")


def _print_summary(rows):
    table = [SUMMARY_COLUMNS] + [tuple(str(v) for v in r) for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]
    for r in table:
        print("  ".join(
            cell.ljust(w) if i == 0 else cell.rjust(w)
            for i, (cell, w) in enumerate(zip(r, widths))))


def _tune_search(cfg, backend, registry, progs):
    rows, records, runs, trace_rows = [], [], [], []
    for prog in progs:
        res = _run_search_engine(cfg, backend, prog, registry)
        for i, (seq, cyc) in enumerate(res.evals, start=1):
            records.append(EvalRecord(sample=i, sequence=list(seq),
                                      cycles=cyc, program=prog.name))
        trace_rows.extend((prog.name, si, best) for si, best in res.trace)
        run = res.to_dict()
        run["program"] = prog.name
        runs.append(run)
        rows.append(_summary_row(backend, prog, cfg.baseline,
                                 res.best_sequence, res.samples_used,
                                 res.wall_ms))
        print(f"{prog.name}: best {list(res.best_sequence)} "
              f"({registry.flags(res.best_sequence)}) -> {res.best_cycles}")
    return rows, records, runs, trace_rows, ("program", "sample",
                                             "best_cycles")


def _train_rl(cfg, backend, registry, progs):
    """Build the env for cfg and train. Returns (result, episodes)."""
    p = cfg.params
    if cfg.engine == "ppo-multiaction":
        steps = p["steps"] or cfg.n
        env = VectorEnv(backend, progs[0], registry=registry, n=cfg.n,
                        steps=steps, reward=cfg.reward)
        episodes = _rl_budget_episodes(cfg, steps + 1)
        res = train_vector_ppo(env, episodes=episodes, seed=cfg.seed,
                               hidden=p["hidden"], cfg=_ppo_cfg(p),
                               batch_episodes=p["batch_episodes"],
                               record_episodes=True)
        return res, episodes
    rotate = None
    env_progs = progs
    if cfg.rotation == "roundrobin" and len(progs) > 1:
        env_progs, rotate = [progs[0]], list(progs)
    env = PhaseEnv(backend, env_progs, registry=registry, n=cfg.n,
                   mode=cfg.mode, reward=cfg.reward, stride=cfg.stride,
                   normalization=cfg.normalization,
                   record_observations=cfg.record_observations,
                   feature_mask=cfg.feature_mask or None)
    per_episode = math.ceil(cfg.n / cfg.stride) * len(env_progs)
    episodes = _rl_budget_episodes(cfg, per_episode)
    if cfg.engine == "pg":
        res = train_pg(env, episodes=episodes, seed=cfg.seed,
                       hidden=p["hidden"], lr=p["lr"],
                       batch_episodes=p["batch_episodes"],
                       optimizer=p["optimizer"], baseline=p["baseline"],
                       record_episodes=True, rotate_programs=rotate)
    elif cfg.engine == "ppo":
        res = train_ppo(env, episodes=episodes, seed=cfg.seed,
                        hidden=p["hidden"], cfg=_ppo_cfg(p),
                        batch_episodes=p["batch_episodes"],
                        record_episodes=True, rotate_programs=rotate)
    else:
        res = train_dqn(env, episodes=episodes, seed=cfg.seed,
                        hidden=p["hidden"], lr=p["lr"], gamma=p["gamma"],
                        buffer_capacity=p["buffer"],
                        batch_size=p["batch_size"],
                        target_sync=p["target_sync"], warmup=p["warmup"],
                        epsilon_start=p["epsilon_start"],
                        epsilon_end=p["epsilon_end"],
                        record_episodes=True, rotate_programs=rotate)
    return res, episodes


def _tune_rl(cfg, backend, registry, progs, out_dir):
    t0 = time.perf_counter()
    start_samples = backend.samples
    res, episodes = _train_rl(cfg, backend, registry, progs)
    wall_ms = (time.perf_counter() - t0) * 1000
    samples = backend.samples - start_samples

    trace_rows, best = [], float("inf")
    for i, (s, c) in enumerate(zip(res.samples, res.final_cycles), start=1):
        best = min(best, c)
        trace_rows.append((i, s, c, best))
    run = {
        "engine": cfg.engine,
        "kind": res.kind,
        "programs": list(cfg.programs),
        "episodes": episodes,
        "best_cycles": res.best_cycles,
        "best_sequence": [int(a) for a in res.best_sequence],
        "best_sample": res.best_sample,
        "samples_used": samples,
        "wall_ms": wall_ms,
    }
    net = res.policy if res.policy is not None else res.qnet
    save_checkpoint(out_dir / "policy.npz", net, kind=res.kind, seed=cfg.seed)
    rows = [_summary_row(backend, prog, cfg.baseline, res.best_sequence,
                         samples, wall_ms) for prog in progs]
    print(f"best {list(res.best_sequence)} "
          f"({registry.flags(res.best_sequence)}) -> {res.best_cycles}")
    return rows, res.records, [run], trace_rows, ("episode", "samples",
                                                  "final_cycles",
                                                  "best_cycles")


def cmd_tune(args):
    cfg = RunConfig.from_file(args.config)
    scn, scn_text = cfg.resolve_scenario()
    _resolve_run(cfg, scn)
    out = args.out or cfg.out
    if not out:
        raise ConfigError("out: no output directory (set out = ... in the "
                          "config or pass --out)")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)

    backend = SyntheticBackend()
    registry = scn.registry()
    progs = [scn.program(name) for name in cfg.programs]
    manifest = build_manifest(cfg, scn_text)

    if cfg.engine in RL_ENGINES:
        rows, records, runs, trace_rows, trace_header = _tune_rl(
            cfg, backend, registry, progs, out_dir)
    else:
        rows, records, runs, trace_rows, trace_header = _tune_search(
            cfg, backend, registry, progs)

    write_log(out_dir / "episodes.jsonl", records)
    _write_json(out_dir / "result.json", {"engine": cfg.engine, "runs": runs})
    _write_csv(out_dir / "trace.csv", trace_header, trace_rows)
    _write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, rows)
    manifest.finished = _utcnow()
    write_manifest(out_dir / "manifest.json", manifest)
    _print_summary(rows)
    print(f"run artifacts in {out_dir}")
    return 0


# -- analyze -------------------------------------------------------------

def cmd_analyze(args):
    episodes = []
    for path in args.episodes:
        try:
            eps, _ = read_log(path)
        except OSError as exc:
            raise PhaserError(f"cannot read {path}: {exc}") from None
        episodes.extend(eps)
    episodes = [ep for ep in episodes if ep.mode != "vector"]
    if not episodes:
        raise EmptyDataset("no per-action episode records in the given logs")

    applied = sorted({a for ep in episodes for a in ep.actions if a >= 0})
    forests, columns = {}, None
    for pid in applied:
        ds = build_dataset(episodes, pid, mode=args.mode)
        if columns is None:
            columns = ds.columns
        forests[pid] = train_forest(ds, n_trees=args.trees,
                                    max_depth=args.depth,
                                    min_split=args.min_split,
                                    seed=args.seed, workers=args.workers)
    mat = importance_matrix(forests, mode=args.mode, columns=columns)

    out = Path(args.out)
    long_path = out.with_suffix(".long.csv")
    mask_path = out.with_suffix(".mask.json")
    write_importance_csv(out, mat)
    write_importance_long_csv(long_path, mat)
    cols, passes = filter_by_importance(mat, args.threshold)
    _write_json(mask_path, {
        "mode": args.mode,
        "threshold": args.threshold,
        "columns": list(cols),
        "column_names": [mat.columns[i] for i in cols],
        "passes": list(passes),
        "degenerate_passes": list(mat.zero_rows),
    })

    space = sorted({p for ep in episodes for p in (ep.action_space or [])})
    never_applied = [p for p in space if p not in forests]
    print(f"{len(mat.passes)} passes analyzed; threshold {args.threshold} "
          f"keeps {len(cols)} columns and {len(passes)} passes")
    if mat.zero_rows:
        print("degenerate rows (one-sided labels): "
              + " ".join(str(p) for p in mat.zero_rows))
    if never_applied:
        print("in the action space but never applied: "
              + " ".join(str(p) for p in never_applied))
    print(f"wrote {out}, {long_path}, {mask_path}")
    return 0


# -- generalize ----------------------------------------------------------

def _load_corpus(spec):
    """[(path, Scenario, text)] from a .scn file or a directory of them."""
    p = Path(spec)
    if p.is_dir():
        files = sorted(p.glob("*.scn"))
        if not files:
            raise ConfigError(f"{spec}: no .scn files in directory")
    elif p.is_file():
        files = [p]
    else:
        raise ConfigError(f"{spec}: not a file or directory")
    out = []
    for f in files:
        text = f.read_text()
        out.append((f, loads_scenario(text, name=f.stem), text))
    return out


def _load_replay(path):
    """Best sequence from a SearchResult JSON or a tune result.json."""
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not JSON: {exc}") from None
    if "best_sequence" in d:
        return [int(a) for a in d["best_sequence"]]
    runs = [r for r in d.get("runs", ()) if "best_sequence" in r]
    if runs:
        chosen = min(runs, key=lambda r: r.get("best_cycles", float("inf")))
        return [int(a) for a in chosen["best_sequence"]]
    raise ConfigError(f"{path}: no best_sequence found")


def cmd_generalize(args):
    cfg = RunConfig.from_file(args.config)
    if cfg.engine not in ("pg", "ppo", "dqn"):
        raise ConfigError("engine: generalize needs pg, ppo or dqn")
    train_items = _load_corpus(args.train_corpus)
    test_items = _load_corpus(args.test_corpus)
    subset = tuple(train_items[0][1].subset)
    for path, scn, _ in train_items + test_items:
        if tuple(scn.subset) != subset:
            raise ConfigError(
                f"{path}: pass subsets differ across the corpora, so the "
                "action spaces are incompatible")
    registry = train_items[0][1].registry()
    train_progs = [p for _, s, _ in train_items for p in s.programs]
    test_pairs = [(s, p) for _, s, _ in test_items for p in s.programs]

    n = cfg.n or train_items[0][1].n
    if n < 1:
        raise ConfigError("n: not set and the train corpus suggests none")
    cfg.n = n
    if cfg.stride > n:
        raise ConfigError(f"stride: {cfg.stride} exceeds n = {n}")
    cfg.programs = tuple(p.name for p in train_progs)
    cfg.scenario = str(args.train_corpus)
    if (len(train_progs) > 1 and cfg.rotation == "joint"
            and cfg.reward != "geomean"):
        raise ConfigError(
            "reward: joint multi-program training needs reward = geomean")

    out = args.out or cfg.out
    if not out:
        raise ConfigError("out: no output directory (set out = ... in the "
                          "config or pass --out)")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)

    backend = SyntheticBackend()
    corpus_text = "".join(text for _, _, text in train_items + test_items)
    manifest = build_manifest(cfg, corpus_text)

    replay_seq, net = None, None
    if args.replay:
        replay_seq = _load_replay(args.replay)
        train_info = {"replay": str(args.replay),
                      "sequence": [int(a) for a in replay_seq]}
    elif args.checkpoint:
        probe = PhaseEnv(backend, [train_progs[0]], registry=registry, n=n,
                         mode=cfg.mode, reward=cfg.reward, stride=cfg.stride,
                         normalization=cfg.normalization,
                         feature_mask=cfg.feature_mask or None)
        widths = (probe.observation_size, *cfg.params["hidden"], probe.k)
        net, _, meta = load_checkpoint(args.checkpoint,
                                       expect_widths=widths,
                                       expect_kind=cfg.engine)
        train_info = {"checkpoint": str(args.checkpoint),
                      "widths": list(meta["widths"])}
    else:
        t0 = time.perf_counter()
        start_samples = backend.samples
        res, episodes = _train_rl(cfg, backend, registry, train_progs)
        net = res.policy if res.policy is not None else res.qnet
        save_checkpoint(out_dir / "policy.npz", net, kind=res.kind,
                        seed=cfg.seed)
        train_info = {
            "episodes": episodes,
            "best_cycles": res.best_cycles,
            "best_sequence": [int(a) for a in res.best_sequence],
            "samples": backend.samples - start_samples,
            "wall_ms": (time.perf_counter() - t0) * 1000,
        }

    rows, records, tests = [], [], []
    for scn, prog in test_pairs:
        baseline_seq = cfg.baseline or tuple(scn.baseline)
        before = backend.samples
        t0 = time.perf_counter()
        if replay_seq is not None:
            cycles = backend.evaluate(prog, replay_seq)
            final_seq = list(replay_seq)
            records.append(EvalRecord(sample=1, sequence=final_seq,
                                      cycles=cycles, program=prog.name))
        else:
            env = PhaseEnv(backend, [prog], registry=registry, n=n,
                           mode=cfg.mode, reward=cfg.reward,
                           stride=cfg.stride,
                           normalization=cfg.normalization,
                           record_observations=cfg.record_observations,
                           feature_mask=cfg.feature_mask or None)
            rec = greedy_rollout(env, net)
            records.append(rec)
            cycles = rec.final_cycles[0]
            final_seq = rec.actions
        wall_ms = (time.perf_counter() - t0) * 1000
        samples = backend.samples - before
        base = (backend.evaluate(prog, baseline_seq, count=False)
                if baseline_seq else backend.initial_cost(prog))
        speedup = base / cycles - 1.0
        tests.append({"program": prog.name,
                      "baseline_cycles": int(base),
                      "cycles": int(cycles),
                      "sequence": [int(a) for a in final_seq],
                      "speedup": speedup,
                      "samples": samples})
        rows.append((prog.name, int(base), int(cycles), f"{speedup:.6f}",
                     samples, f"{wall_ms:.1f}"))

    write_log(out_dir / "episodes.jsonl", records)
    _write_json(out_dir / "gen_result.json",
                {"engine": cfg.engine, "train": train_info, "tests": tests})
    _write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, rows)
    manifest.finished = _utcnow()
    write_manifest(out_dir / "manifest.json", manifest)
    _print_summary(rows)
    print(f"run artifacts in {out_dir}")
    return 0


# -- report --------------------------------------------------------------

def _read_summary(path):
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise PhaserError(f"cannot read {path}: {exc}") from None


def _read_trace(path):
    """Normalized (program, samples, best_cycles) rows from either
    trace.csv layout; empty when the run has no trace."""
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = []
            for row in reader:
                if "program" in row:
                    rows.append((row["program"], int(row["sample"]),
                                 float(row["best_cycles"])))
                else:
                    rows.append(("", int(row["samples"]),
                                 float(row["best_cycles"])))
            return rows
    except OSError:
        return []


def _best_cycles_by_program(episodes, evals):
    best = {}
    for ev in evals:
        c = float(ev.cycles)
        best[ev.program] = min(best.get(ev.program, c), c)
    for ep in episodes:
        for name, c in zip(ep.programs, ep.final_cycles):
            c = float(c)
            best[name] = min(best.get(name, c), c)
    return best


_PLOT_SCRIPT = '''\
"""Generated by `phaser report`. Renders the two standard figures from
the CSVs written next to this script: a speedup-vs-sequence-length bar
chart per engine and a best-cycles-vs-samples convergence plot."""
import csv
from collections import defaultdict
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = Path(__file__).parent

by_engine = defaultdict(dict)
with open(here / "speedup_vs_n.csv", newline="") as fh:
    for row in csv.DictReader(fh):
        key = (row["engine"], int(row["n"]))
        by_engine[key].setdefault("speedups", []).append(
            float(row["speedup"]))
ns = sorted({n for _, n in by_engine})
engines = sorted({e for e, _ in by_engine})
fig, ax = plt.subplots(figsize=(7, 4))
width = 0.8 / max(len(engines), 1)
for i, engine in enumerate(engines):
    xs, ys = [], []
    for j, n in enumerate(ns):
        if (engine, n) in by_engine:
            vals = by_engine[(engine, n)]["speedups"]
            xs.append(j + i * width)
            ys.append(sum(vals) / len(vals))
    ax.bar(xs, ys, width=width, label=engine)
ax.set_xticks([j + 0.4 - width / 2 for j in range(len(ns))])
ax.set_xticklabels([str(n) for n in ns])
ax.set_xlabel("sequence length N")
ax.set_ylabel("mean speedup vs baseline")
ax.legend()
fig.tight_layout()
fig.savefig(here / "speedup_vs_n.png", dpi=150)

series = defaultdict(list)
with open(here / "cycles_vs_samples.csv", newline="") as fh:
    for row in csv.DictReader(fh):
        label = row["run"] if not row["program"] else (
            row["run"] + "/" + row["program"])
        series[label].append((int(row["samples"]),
                              float(row["best_cycles"])))
fig, ax = plt.subplots(figsize=(7, 4))
for label, pts in sorted(series.items()):
    pts.sort()
    ax.plot([s for s, _ in pts], [c for _, c in pts], label=label)
ax.set_xlabel("backend samples")
ax.set_ylabel("best cycles so far")
ax.legend(fontsize=7)
fig.tight_layout()
fig.savefig(here / "cycles_vs_samples.png", dpi=150)
print("wrote", here / "speedup_vs_n.png", "and",
      here / "cycles_vs_samples.png")
'''


def cmd_report(args):
    loaded = []
    for d in args.runs:
        p = Path(d)
        if not p.is_dir():
            raise PhaserError(f"run directory not found: {p}")
        manifest = read_manifest(p / "manifest.json")
        try:
            episodes, evals = read_log(p / "episodes.jsonl")
        except OSError as exc:
            raise PhaserError(
                f"cannot read episodes.jsonl in {p}: {exc}") from None
        loaded.append({
            "dir": p,
            "manifest": manifest,
            "summary": _read_summary(p / "summary.csv"),
            "best": _best_cycles_by_program(episodes, evals),
            "trace": _read_trace(p / "trace.csv"),
        })

    versions = sorted({r["manifest"].artifact_version for r in loaded})
    if len(versions) > 1 and not args.force:
        raise PhaserError(
            f"runs mix artifact versions {versions}; pass --force to "
            "aggregate anyway")

    # speedups recomputed from the raw cycle logs, never copied
    table = []
    for r in loaded:
        engine = r["manifest"].config["engine"]
        n = r["manifest"].config["n"]
        for row in r["summary"]:
            prog = row["program"]
            if prog not in r["best"]:
                raise PhaserError(
                    f"{r['dir']}: no logged cycles for program '{prog}'")
            best = r["best"][prog]
            baseline = float(row["baseline_cycles"])
            table.append({
                "run": r["dir"].name,
                "engine": engine,
                "n": n,
                "program": prog,
                "baseline_cycles": baseline,
                "best_cycles": best,
                "speedup": baseline / best - 1.0,
                "samples": int(row["samples"]),
            })

    groups = {}
    for row in table:
        groups.setdefault((row["engine"], row["n"]), []).append(row)
    summary = []
    for (engine, n), rows in sorted(groups.items()):
        summary.append({
            "engine": engine,
            "n": n,
            "programs": len(rows),
            "geomean_cycles": geomean([r["best_cycles"] for r in rows]),
            "mean_speedup": float(np.mean([r["speedup"] for r in rows])),
        })

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    run_header = ("run", "engine", "n", "program", "baseline_cycles",
                  "best_cycles", "speedup", "samples")
    if out.suffix == ".csv":
        _write_csv(out, run_header,
                   [[row[k] for k in run_header] for row in table])
    else:
        lines = ["# Phase-ordering report", "", "## Runs", ""]
        lines.append("| " + " | ".join(run_header) + " |")
        lines.append("|" + "---|" * len(run_header))
        for row in table:
            lines.append("| " + " | ".join([
                row["run"], row["engine"], str(row["n"]), row["program"],
                f"{row['baseline_cycles']:.0f}", f"{row['best_cycles']:.0f}",
                f"{row['speedup']:+.4f}", str(row["samples"])]) + " |")
        lines += ["", "## Engine summary", ""]
        sum_header = ("engine", "n", "programs", "geomean_cycles",
                      "mean_speedup")
        lines.append("| " + " | ".join(sum_header) + " |")
        lines.append("|" + "---|" * len(sum_header))
        for row in summary:
            lines.append("| " + " | ".join([
                row["engine"], str(row["n"]), str(row["programs"]),
                f"{row['geomean_cycles']:.2f}",
                f"{row['mean_speedup']:+.4f}"]) + " |")
        out.write_text("\n".join(lines) + "\n")

    out_dir = out.parent
    _write_csv(out_dir / "speedup_vs_n.csv",
               ("run", "engine", "n", "program", "speedup"),
               [(row["run"], row["engine"], row["n"], row["program"],
                 repr(row["speedup"])) for row in table])
    trace_rows = []
    for r in loaded:
        engine = r["manifest"].config["engine"]
        for prog, samples, best in r["trace"]:
            trace_rows.append((r["dir"].name, engine, prog, samples,
                               repr(best)))
    _write_csv(out_dir / "cycles_vs_samples.csv",
               ("run", "engine", "program", "samples", "best_cycles"),
               trace_rows)
    written = [str(out), str(out_dir / "speedup_vs_n.csv"),
               str(out_dir / "cycles_vs_samples.csv")]
    if args.plots:
        (out_dir / "plot_report.py").write_text(_PLOT_SCRIPT)
        written.append(str(out_dir / "plot_report.py"))
    print(f"aggregated {len(loaded)} runs, {len(table)} program rows")
    print("wrote " + ", ".join(written))
    return 0


# -- entry point ---------------------------------------------------------

def _build_parser():
    parser = _Parser(prog="phaser",
                     description="Compiler phase-ordering autotuner.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("extract",
                       help="static feature vectors from IR files")
    p.add_argument("--input", nargs="+", required=True, metavar="IR",
                   help="textual IR files")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("tune", help="run one tuning engine per the config")
    p.add_argument("--config", required=True, help="run config file")
    p.add_argument("--out", default="",
                   help="output directory (overrides out = in the config)")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("analyze",
                       help="per-pass forest importances from episode logs")
    p.add_argument("--episodes", nargs="+", required=True,
                   help="episode JSONL files")
    p.add_argument("--mode", choices=("features", "histogram"),
                   default="features")
    p.add_argument("--out", required=True,
                   help="importance matrix CSV; .long.csv and .mask.json "
                        "siblings are written next to it")
    p.add_argument("--threshold", type=float, default=0.0,
                   help="importance cutoff for the filter mask")
    p.add_argument("--trees", type=int, default=N_TREES)
    p.add_argument("--depth", type=int, default=MAX_DEPTH)
    p.add_argument("--min-split", type=int, default=MIN_SPLIT)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("generalize",
                       help="train on one corpus, infer on a held-out one")
    p.add_argument("--train-corpus", required=True,
                   help=".scn file or directory of them")
    p.add_argument("--test-corpus", required=True,
                   help=".scn file or directory of them")
    p.add_argument("--config", required=True, help="RL run config file")
    p.add_argument("--out", default="",
                   help="output directory (overrides out = in the config)")
    p.add_argument("--checkpoint", default=None,
                   help="load this policy instead of training")
    p.add_argument("--replay", default=None,
                   help="replay the best_sequence of this result JSON "
                        "instead of training a policy")
    p.set_defaults(func=cmd_generalize)

    p = sub.add_parser("report", help="aggregate finished run directories")
    p.add_argument("--runs", nargs="+", required=True,
                   help="run directories written by tune/generalize")
    p.add_argument("--out", required=True, help="report .md or .csv path")
    p.add_argument("--plots", action="store_true",
                   help="also write a matplotlib script for the figures")
    p.add_argument("--force", action="store_true",
                   help="aggregate runs despite artifact version mismatch")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except PhaserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
