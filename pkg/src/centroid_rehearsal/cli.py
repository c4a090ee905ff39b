"""Experiment runner: seeded run matrices, CSV results, drift reports.

Verbs:

    centroid-rehearsal run <config.json> [--max-grid N] [--workers K]
    centroid-rehearsal summarize <results_dir>
    centroid-rehearsal drift-report <checkpoint_dir>

The config file is JSON; see README for the schema. ``run`` writes
``results.csv`` (one row per grid point x seed) plus one JSON document per
run; ``summarize`` aggregates mean and sample std per config fingerprint;
``drift-report`` recomputes centroid displacement from stored checkpoints.
Exit codes: 0 ok, 1 runtime failure, 2 config problem.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import itertools
import json
import sys
import time
from pathlib import Path

import numpy as np

from .benchmarks import (
    PermutedSpec,
    SplitGaussianSpec,
    load_external,
    make_permuted,
    make_split_gaussian,
)
from .errors import ConfigError
from .learner import Checkpoint, ContinualConfig, checkpoint_drift, load_checkpoint, run_sequence

RESULT_COLUMNS = [
    "fingerprint", "seed", "sampler", "epsilon", "gamma", "mem_per_class",
    "cd", "fd", "A_T", "F_T", "LTR", "drift_final", "seconds",
]
GRID_AXES = ("epsilon", "gamma", "memory_per_class", "sampler", "cd_weight", "fd_weight")
DEFAULT_MAX_GRID = 256


def build_benchmark(bench_cfg: dict, seed: int):
    kind = bench_cfg.get("kind")
    if kind == "split_gaussian":
        fields = {k: v for k, v in bench_cfg.items() if k != "kind"}
        try:
            spec = SplitGaussianSpec(**fields)
        except TypeError as e:
            raise ConfigError(f"benchmark: {e}") from None
        return make_split_gaussian(spec, seed)
    if kind == "permuted":
        for key in ("format", "train_path", "test_path"):
            if key not in bench_cfg:
                raise ConfigError(f"benchmark.{key} is required for kind 'permuted'")
        train = load_external(bench_cfg["train_path"], bench_cfg["format"])
        test = load_external(bench_cfg["test_path"], bench_cfg["format"])
        limit = bench_cfg.get("train_limit")
        if limit:
            train.x, train.y = train.x[:limit], train.y[:limit]
        limit = bench_cfg.get("test_limit")
        if limit:
            test.x, test.y = test.x[:limit], test.y[:limit]
        spec = PermutedSpec(train=train, test=test, tasks=int(bench_cfg.get("tasks", 5)))
        return make_permuted(spec, seed)
    raise ConfigError(f"benchmark.kind must be 'split_gaussian' or 'permuted', got {kind!r}")


def fingerprint(benchmark_cfg: dict, learner_cfg: dict) -> str:
    """Stable hash of the resolved config; identical hash means identical config."""
    blob = json.dumps({"benchmark": benchmark_cfg, "learner": learner_cfg},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def expand_grid(base_learner: dict, grid: dict) -> list[dict]:
    axes = []
    for key in GRID_AXES:
        if key in grid:
            values = grid[key]
            if not isinstance(values, list) or not values:
                raise ConfigError(f"grid.{key} must be a non-empty list")
            axes.append([(key, v) for v in values])
    if not axes:
        return [dict(base_learner)]
    points = []
    for combo in itertools.product(*axes):
        cfg = dict(base_learner)
        cfg.update(dict(combo))
        points.append(cfg)
    return points


def _resolved_learner_dict(learner_cfg: dict) -> dict:
    cfg = dict(learner_cfg)
    cfg.pop("seed", None)
    try:
        resolved = ContinualConfig(**cfg)
    except TypeError as e:
        raise ConfigError(f"learner: {e}") from None
    d = resolved.to_dict()
    d.pop("seed")
    return d


def run_one(job: dict) -> dict:
    """Execute one (grid point, seed) run and write its JSON document."""
    seed = job["seed"]
    tasks = build_benchmark(job["benchmark"], seed)
    config = ContinualConfig(**{**job["learner"], "seed": seed})
    ckpt_dir = None
    if job.get("write_checkpoints"):
        ckpt_dir = Path(job["output_dir"]) / "checkpoints" / f"{job['fingerprint']}_{seed}"
    result = run_sequence(config, tasks, checkpoint_dir=ckpt_dir)
    run_doc = {
        "fingerprint": job["fingerprint"],
        "seed": seed,
        "benchmark": job["benchmark"],
        "learner": job["learner"],
        "result": result.to_dict(),
    }
    runs_dir = Path(job["output_dir"]) / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    (runs_dir / f"{job['fingerprint']}_{seed}.json").write_text(json.dumps(run_doc))
    return {
        "fingerprint": job["fingerprint"],
        "seed": seed,
        "sampler": config.sampler,
        "epsilon": config.epsilon,
        "gamma": config.gamma,
        "mem_per_class": config.memory_per_class,
        "cd": config.cd_weight,
        "fd": config.fd_weight,
        "A_T": result.average_accuracy,
        "F_T": result.forgetting,
        "LTR": result.long_term_remembering,
        "drift_final": result.drift_final,
        "seconds": result.seconds,
    }


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results_csv(rows: list[dict], path: Path) -> None:
    rows = sorted(rows, key=lambda r: (r["fingerprint"], r["seed"]))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(RESULT_COLUMNS)
        for r in rows:
            writer.writerow([_fmt(r[c]) for c in RESULT_COLUMNS])


def cmd_run(config_path: str, max_grid: int | None, workers: int | None) -> int:
    try:
        raw = json.loads(Path(config_path).read_text())
    except FileNotFoundError:
        print(f"config not found: {config_path}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as e:
        print(f"config is not valid JSON: {e}", file=sys.stderr)
        return 2
    try:
        jobs, output_dir = _plan_jobs(raw, max_grid)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    workers = workers or int(raw.get("workers", 1))
    t0 = time.perf_counter()
    try:
        if workers > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(run_one, jobs))
        else:
            rows = [run_one(job) for job in jobs]
    except Exception as e:  # noqa: BLE001 - surface the failing run and stop
        print(f"run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    write_results_csv(rows, output_dir / "results.csv")
    print(f"wrote {len(rows)} rows to {output_dir / 'results.csv'} "
          f"in {time.perf_counter() - t0:.1f}s")
    return 0


def _plan_jobs(raw: dict, max_grid: int | None) -> tuple[list[dict], Path]:
    for key in ("benchmark", "output_dir"):
        if key not in raw:
            raise ConfigError(f"missing required field {key!r}")
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds must be a non-empty list of integers")
    benchmark_cfg = raw["benchmark"]
    if not isinstance(benchmark_cfg, dict):
        raise ConfigError("benchmark must be an object")
    base_learner = raw.get("learner", {})
    if not isinstance(base_learner, dict):
        raise ConfigError("learner must be an object")
    grid = raw.get("grid", {})
    if not isinstance(grid, dict):
        raise ConfigError("grid must be an object")
    unknown = set(grid) - set(GRID_AXES)
    if unknown:
        raise ConfigError(f"unknown grid axes {sorted(unknown)}; allowed: {GRID_AXES}")
    points = expand_grid(base_learner, grid)
    limit = max_grid or int(raw.get("max_grid", DEFAULT_MAX_GRID))
    if len(points) * len(seeds) > limit:
        raise ConfigError(
            f"grid of {len(points)} points x {len(seeds)} seeds exceeds max_grid={limit}"
        )
    output_dir = Path(raw["output_dir"])
    output_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for point in points:
        resolved = _resolved_learner_dict(point)
        fp = fingerprint(benchmark_cfg, resolved)
        for seed in seeds:
            if not isinstance(seed, int):
                raise ConfigError(f"seeds must be integers, got {seed!r}")
            jobs.append({
                "fingerprint": fp,
                "seed": seed,
                "benchmark": benchmark_cfg,
                "learner": resolved,
                "output_dir": str(output_dir),
                "write_checkpoints": bool(raw.get("write_checkpoints", False)),
            })
    return jobs, output_dir


def cmd_summarize(results_dir: str) -> int:
    path = Path(results_dir) / "results.csv"
    if not path.exists():
        print(f"no results.csv in {results_dir}", file=sys.stderr)
        return 2
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        print(f"{path} holds no result rows", file=sys.stderr)
        return 2
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r["fingerprint"], []).append(r)
    metric_cols = ["A_T", "F_T", "LTR", "drift_final"]
    out_rows = []
    for fp in sorted(groups):
        members = groups[fp]
        first = members[0]
        out = {
            "fingerprint": fp, "seeds": len(members),
            "sampler": first["sampler"], "epsilon": first["epsilon"],
            "gamma": first["gamma"], "mem_per_class": first["mem_per_class"],
            "cd": first["cd"], "fd": first["fd"],
        }
        for col in metric_cols:
            vals = np.array([float(m[col]) for m in members])
            out[f"{col}_mean"] = float(np.mean(vals))
            out[f"{col}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out_rows.append(out)
    summary_path = Path(results_dir) / "summary.csv"
    cols = list(out_rows[0].keys())
    with open(summary_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for r in out_rows:
            writer.writerow([_fmt(r[c]) for c in cols])
    header = (f"{'config':<14}{'sampler':<16}{'eps':>7}{'cd':>6}{'fd':>6}"
              f"{'A_T':>16}{'F_T':>16}{'LTR':>16}")
    print(header)
    for r in out_rows:
        print(f"{r['fingerprint']:<14}{r['sampler']:<16}{float(r['epsilon']):>7.3g}"
              f"{float(r['cd']):>6.2g}{float(r['fd']):>6.2g}"
              f"{r['A_T_mean']:>8.4f} ± {r['A_T_std']:<6.4f}"
              f"{r['F_T_mean']:>8.4f} ± {r['F_T_std']:<6.4f}"
              f"{r['LTR_mean']:>8.4f} ± {r['LTR_std']:<6.4f}")
    print(f"wrote {summary_path}")
    return 0


def cmd_drift_report(checkpoint_dir: str) -> int:
    ckpt_dir = Path(checkpoint_dir)
    files = sorted(ckpt_dir.glob("task_*.json"))
    if not files:
        print(f"no checkpoints in {checkpoint_dir}", file=sys.stderr)
        return 2
    rows = []
    for path in files:
        try:
            cp: Checkpoint = load_checkpoint(path)
        except Exception as e:  # noqa: BLE001 - name the corrupt file
            print(f"corrupt checkpoint {path}: {type(e).__name__}: {e}", file=sys.stderr)
            return 1
        for task, disp in checkpoint_drift(cp).items():
            rows.append({"task": task, "checkpoint": cp.task_id, "mean_displacement": disp})
    rows.sort(key=lambda r: (r["task"], r["checkpoint"]))
    out_path = ckpt_dir / "drift.csv"
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["task", "checkpoint", "mean_displacement"])
        for r in rows:
            writer.writerow([r["task"], r["checkpoint"], _fmt(float(r["mean_displacement"]))])
    for r in rows:
        print(f"task {r['task']} @ checkpoint {r['checkpoint']}: "
              f"{r['mean_displacement']:.6f}")
    print(f"wrote {out_path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="centroid-rehearsal",
        description="Continual-learning rehearsal experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute a seeded run matrix from a JSON config")
    p_run.add_argument("config")
    p_run.add_argument("--max-grid", type=int, default=None,
                       help="abort if grid points x seeds exceed this")
    p_run.add_argument("--workers", type=int, default=None,
                       help="parallel worker processes")
    p_sum = sub.add_parser("summarize", help="aggregate results.csv by config")
    p_sum.add_argument("results_dir")
    p_drift = sub.add_parser("drift-report", help="per-task drift from checkpoints")
    p_drift.add_argument("checkpoint_dir")
    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.max_grid, args.workers)
    if args.command == "summarize":
        return cmd_summarize(args.results_dir)
    return cmd_drift_report(args.checkpoint_dir)


if __name__ == "__main__":
    sys.exit(main())
