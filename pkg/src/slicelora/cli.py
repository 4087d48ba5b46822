"""Command-line entry point: ``run``, ``mine`` and ``inspect-init``.

Exit codes: 0 success, 1 configuration error, 2 at least one failed sweep
cell, 3 enumeration budget refusal.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from ._seeding import derive_seed
from .adapters import initialize
from .config import RunConfig, build_experiment, build_model, dump_config, load_config, validate_model
from .exceptions import BudgetExceeded, ConfigError, SliceError
from .harness import run_sequence
from .miner import (DEFAULT_BUDGET, build_pair_cache, load_sketch, mine, miner_report, save_sketch,
                    sketch_task_gradient, write_report)
from .model import load_jsonl_task
from .synthetic import angle_pool, subspace_pool

__all__ = ["main", "cmd_run", "cmd_mine", "cmd_inspect_init"]

EXIT_OK, EXIT_CONFIG, EXIT_CELL, EXIT_BUDGET = 0, 1, 2, 3
METRICS = ("ap", "fp", "fgt", "gp", "ip")


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


# ---------------------------------------------------------------- run

def _run_cell(data, base_dir, seed, out_dir):
    """One (cell, seed) run; returns a status record. Executed in worker processes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = RunConfig(data, Path(base_dir))
    try:
        exp = build_experiment(cfg, seed)
        result = run_sequence(cfg.sequence_config(seed, exp))
    except BudgetExceeded as exc:
        (out_dir / "error.txt").write_text(f"{exc}\n")
        return {"seed": seed, "status": "budget", "error": str(exc)}
    except Exception as exc:  # isolate the cell; the sweep goes on
        (out_dir / "error.txt").write_text("".join(traceback.format_exception(exc)))
        return {"seed": seed, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    (out_dir / "results.csv").write_text(result.results.to_csv())
    summary = {
        "config": data,
        "seed": seed,
        "sequence": [t.task_id for t in exp.tasks],
        "mining": exp.mining,
        "metrics": result.metrics.to_dict(),
        "held_out_scores": {f"{k}_standin": v for k, v in result.held_out_scores.items()},
        "stages": [s.to_dict() for s in result.stages],
    }
    _dump_json(summary, out_dir / "summary.json")
    return {"seed": seed, "status": "ok", "metrics": result.metrics.to_dict()}


def _aggregate_rows(cells, records):
    rows = []
    for name, params in cells:
        ok = [r["metrics"] for r in records[name] if r["status"] == "ok"]
        row = {"cell": name, **{k: params[k] for k in params}, "seeds_ok": len(ok),
               "seeds_failed": len(records[name]) - len(ok)}
        for m in METRICS:
            key = m if m in ("ap", "fp", "fgt") else f"{m}_standin"
            vals = [r[key] for r in ok if r[key] is not None]
            row[f"{m}_mean"] = float(np.mean(vals)) if vals else math.nan
            row[f"{m}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else (0.0 if vals else math.nan)
        rows.append(row)
    return rows


def cmd_run(config_path, out, jobs=1, dry_run=False) -> int:
    try:
        cfg = load_config(config_path)
        cells = [(f"cell_{i:03d}", params, cell) for i, (params, cell) in enumerate(cfg.cells())]
    except ConfigError as exc:
        _err(exc)
        return EXIT_CONFIG
    if dry_run:
        print(f"{len(cells)} cell(s) x {len(cfg.seeds)} seed(s) = {len(cells) * len(cfg.seeds)} run(s)")
        for name, params, _ in cells:
            desc = ", ".join(f"{k}={v}" for k, v in params.items()) or "(no sweep)"
            print(f"{name}: {desc}; seeds {cfg.seeds}")
        return EXIT_OK
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(dump_config(cfg))
    _dump_json([{"cell": n, "params": p} for n, p, _ in cells], out / "cells.json")

    jobs_list = [(name, cell.data, str(cell.base_dir), seed, str(out / name / f"seed_{seed}"))
                 for name, _, cell in cells for seed in cfg.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, d, b, s, o) for _, d, b, s, o in jobs_list]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [_run_cell(d, b, s, o) for _, d, b, s, o in jobs_list]
    records = {name: [] for name, _, _ in cells}
    for (name, *_), rec in zip(jobs_list, outcomes):
        records[name].append(rec)
        if rec["status"] != "ok":
            _err(f"{name} seed {rec['seed']}: {rec['error']}")

    rows = _aggregate_rows([(n, p) for n, p, _ in cells], records)
    fields = list(rows[0]) if rows else ["cell"]
    with (out / "aggregate.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    statuses = {r["status"] for recs in records.values() for r in recs}
    if "budget" in statuses:
        return EXIT_BUDGET
    return EXIT_CELL if "failed" in statuses else EXIT_OK


# ---------------------------------------------------------------- mine

_MINE_KEYS = ("schema_version", "seed", "model", "sketch", "mine", "pool")


def _load_manifest(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError("", f"pool manifest not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("", f"{path}: not valid YAML ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("", "manifest must be a mapping")
    for key in raw:
        if key not in _MINE_KEYS:
            raise ConfigError(key, "unknown field")
    if raw.get("schema_version") != 1:
        raise ConfigError("schema_version", "missing or unsupported (expected 1)")
    if not isinstance(raw.get("pool"), list) or not raw["pool"]:
        raise ConfigError("pool", "expected a non-empty list of entries")
    return raw, path.parent


def _pool_entries(raw, base_dir, base, seed):
    """Yield ``(task_or_None, sketch_or_None)`` per pool member."""
    for i, entry in enumerate(raw["pool"]):
        where = f"pool[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(where, "expected a mapping")
        kinds = [k for k in ("generator", "file", "sketch") if k in entry]
        if len(kinds) != 1:
            raise ConfigError(where, "needs exactly one of 'generator', 'file' or 'sketch'")
        if "sketch" in entry:
            p = base_dir / entry["sketch"]
            if not p.exists():
                raise ConfigError(f"{where}.sketch", f"sketch file not found: {p}")
            yield None, load_sketch(p)
        elif "file" in entry:
            p = base_dir / entry["file"]
            if not p.exists():
                raise ConfigError(f"{where}.file", f"task file not found: {p}")
            yield load_jsonl_task(p, entry.get("id"), kind=entry.get("kind", "regression")), None
        else:
            families = {"subspace_pool": subspace_pool, "angle_pool": angle_pool}
            fam = families.get(entry["generator"])
            if fam is None:
                raise ConfigError(f"{where}.generator", f"must be one of {sorted(families)}")
            kwargs = {k: v for k, v in entry.items() if k not in ("generator", "size", "seed")}
            params = kwargs.pop("params", {}) or {}
            try:
                tasks = fam(base, entry.get("size", 12), derive_seed(entry.get("seed", seed), "tasks", i),
                            **kwargs, **params)
            except TypeError as exc:
                raise ConfigError(where, str(exc)) from None
            for t in tasks:
                yield t, None


def cmd_mine(pool_path, out, n=None, top_k=None, save_sketches=False) -> int:
    try:
        raw, base_dir = _load_manifest(pool_path)
        seed = raw.get("seed", 0)
        model = validate_model(raw.get("model"), "model")
        sk = {"steps": 4, "batch_size": 16, "projection_dim": None, **(raw.get("sketch") or {})}
        opts = {"n": 3, "top_k": 5, "objective": "conflict", "budget": DEFAULT_BUDGET, **(raw.get("mine") or {})}
        if n is not None:
            opts["n"] = n
        if top_k is not None:
            opts["top_k"] = top_k
        base = build_model(model, seed)
        sketches, fresh = [], []
        for task, sketch in _pool_entries(raw, base_dir, base, seed):
            if sketch is None:
                sketch = sketch_task_gradient(base, task, sk["steps"], sk["batch_size"], seed, sk["projection_dim"])
                fresh.append(sketch)
            sketches.append(sketch)
        cache = build_pair_cache(sketches)
        candidates, visited = mine(cache, opts["n"], opts["top_k"], budget=opts["budget"],
                                   objective=opts["objective"], return_count=True)
    except BudgetExceeded as exc:
        _err(exc)
        return EXIT_BUDGET
    except (ConfigError, SliceError, ValueError) as exc:
        _err(exc)
        return EXIT_CONFIG
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(miner_report(cache, candidates, opts["n"], visited, opts["objective"]), out / "mined.json")
    if save_sketches:
        (out / "sketches").mkdir(exist_ok=True)
        for s in fresh:
            save_sketch(s, out / "sketches" / f"{s.task_id}.bin")
    for i, c in enumerate(candidates, 1):
        print(f"{i}. {' -> '.join(c.task_ids)}  phi_bar={c.phi_bar:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------- inspect-init

def inspect_report(cfg: RunConfig) -> dict:
    """Stages 1-4 for the configured task index on the untrained base; no training."""
    k = cfg.data["inspect"]["task_index"]
    if k is None:
        raise ConfigError("inspect.task_index", "required for inspect-init")
    seed = cfg.data["inspect"]["seed"]
    seed = cfg.seeds[0] if seed is None else seed
    exp = build_experiment(cfg, seed)
    init_cfg = cfg.init_config(seed)
    adapters, info = initialize(exp.base, exp.tasks[k], exp.tasks[:k], init_cfg, return_info=True)
    layers = {}
    for idx, pair in adapters.items():
        entry = {"shape": list(pair.shape), "rank": pair.rank, "scaling": pair.scaling, "method": pair.method,
                 "rescale": pair.report.to_dict() if pair.report is not None else None}
        if idx in info.top_singular_values:
            entry["top_singular_values"] = [float(v) for v in info.top_singular_values[idx]]
        if info.surgery is not None and not info.surgery.skipped:
            entry["inner_product"] = info.surgery.inner_products.get(idx)
            entry["coefficient"] = info.surgery.coefficients.get(idx)
        layers[str(idx)] = entry
    surgery = None
    if info.surgery is not None:
        surgery = info.surgery.to_dict()
    elif init_cfg.method != "slice":
        surgery = {"skipped": True, "reason": f"method {init_cfg.method!r} has no surgery stage"}
    return {
        "seed": seed,
        "method": init_cfg.method,
        "task_index": k,
        "task_id": exp.tasks[k].task_id,
        "previous_tasks": [t.task_id for t in exp.tasks[:k]],
        "surgery_skipped": surgery is None or surgery["skipped"],
        "surgery": surgery,
        "layers": layers,
        "fallback_layers": list(info.fallback_layers),
    }


def cmd_inspect_init(config_path, out) -> int:
    try:
        report = inspect_report(load_config(config_path))
    except BudgetExceeded as exc:
        _err(exc)
        return EXIT_BUDGET
    except ConfigError as exc:
        _err(exc)
        return EXIT_CONFIG
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(report, out / "inspect_init.json")
    s = report["surgery"]
    if report["surgery_skipped"]:
        print(f"task {report['task_id']}: surgery skipped")
    else:
        print(f"task {report['task_id']}: cosine to previous {s['cosine_to_prev_before']:.4f} -> "
              f"{s['cosine_to_prev_after']:.4f}, coefficients {s['coefficients']}")
    for idx, entry in report["layers"].items():
        beta = entry["rescale"]["beta"] if entry["rescale"] else None
        print(f"layer {idx}: beta={beta}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slicelora", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every sweep cell for every seed")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    run.add_argument("--dry-run", action="store_true", help="print the resolved sweep grid and exit")

    mn = sub.add_parser("mine", help="mine the most conflicting task subsets of a pool")
    mn.add_argument("--config", required=True, help="pool manifest")
    mn.add_argument("--out", required=True)
    mn.add_argument("--n", type=int, default=None, help="subset size (overrides the manifest)")
    mn.add_argument("--top-k", type=int, default=None)
    mn.add_argument("--save-sketches", action="store_true", help="write freshly computed sketches under OUT")
    mn.add_argument("--jobs", type=int, default=1, help="accepted for symmetry; mining is single-process")
    mn.add_argument("--dry-run", action="store_true", help="validate the manifest and exit")

    ins = sub.add_parser("inspect-init", help="report initialization diagnostics without training")
    ins.add_argument("--config", required=True)
    ins.add_argument("--out", required=True)
    ins.add_argument("--jobs", type=int, default=1, help="accepted for symmetry")
    ins.add_argument("--dry-run", action="store_true", help="validate the config and exit")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        _err("--jobs must be >= 1")
        return EXIT_CONFIG
    if args.command == "run":
        return cmd_run(args.config, args.out, args.jobs, args.dry_run)
    if args.command == "mine":
        if args.dry_run:
            try:
                _load_manifest(args.config)
            except ConfigError as exc:
                _err(exc)
                return EXIT_CONFIG
            print("manifest ok")
            return EXIT_OK
        return cmd_mine(args.config, args.out, args.n, args.top_k, args.save_sketches)
    if args.dry_run:
        try:
            load_config(args.config)
        except ConfigError as exc:
            _err(exc)
            return EXIT_CONFIG
        print("config ok")
        return EXIT_OK
    return cmd_inspect_init(args.config, args.out)


if __name__ == "__main__":
    sys.exit(main())
