"""Command-line experiment runner.

Verbs::

    irss run      --config cfg.json [--method M] [--set a.b=v ...] [--seeds 0,1] [--out DIR]
    irss sweep    --config cfg.json --grid train.S=1,2,3 [--grid ...] | --grid-file grid.json
    irss bound    [--config bound.json] [--set ...] [--no-empirical] [--out DIR]
    irss gen-data --config cfg.json [--seeds ...] [--out DIR]

Exit codes: 0 success, 2 invalid configuration (message names the field
path), 1 runtime failure (message names the iteration).
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import config as cfgmod
from .errors import ConfigError, IRSSError, TrainingError
from .experiments import build_datasets, mean_sd, read_metrics, run_one, summarize
from .synthdata import SCMConfig, save_dataset
from .theorybound import bound_params_for, bound_report, bound_scm
from .trainer import METHODS, TrainConfig

logger = logging.getLogger("irss")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_seeds(text):
    try:
        if "-" in text and "," not in text:
            lo, hi = (int(t) for t in text.split("-"))
            return list(range(lo, hi + 1))
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse {text!r}; use 0,1,2 or 0-4", "--seeds") from None


def _resolve_from_args(args):
    overrides = list(args.set or [])
    raw = cfgmod.load_raw(args.config, overrides)
    if getattr(args, "seeds", None):
        raw["seeds"] = _parse_seeds(args.seeds)
    if getattr(args, "out", None):
        raw["out"] = args.out
    return cfgmod.resolve(raw, getattr(args, "method", None))


def _run_seeds(resolved, out_dir, workers, prefix=""):
    seeds = resolved["seeds"]
    jobs = [(seed, os.path.join(out_dir, f"seed_{seed}"), f"{prefix}seed{seed}") for seed in seeds]
    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(jobs)))) as pool:
        futures = [pool.submit(run_one, resolved, seed, d, rid) for seed, d, rid in jobs]
        return [f.result() for f in futures]


def cmd_run(args):
    resolved = _resolve_from_args(args)
    out = resolved["out"]
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "config.resolved.json"), resolved)
    results = _run_seeds(resolved, out, args.workers)
    summary = summarize(results)
    _write_json(os.path.join(out, "summary.json"), summary)
    ood = summary["ood_acc"]
    print(f"run: {len(results)} seed(s), ood_acc {ood['mean']:.4f} +- {ood['sd']:.4f} -> {out}")
    return EXIT_OK


def _parse_grid(args):
    grid = {}
    if args.grid_file:
        try:
            with open(args.grid_file) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read grid: {exc}", "--grid-file") from None
        if not isinstance(loaded, dict):
            raise ConfigError("grid file must map dotted paths to value lists", "--grid-file")
        for key, values in loaded.items():
            grid[key] = values if isinstance(values, list) else [values]
    for text in args.grid or []:
        if "=" not in text:
            raise ConfigError(f"{text!r} is not path=v1,v2,...", "--grid")
        key, raw = text.split("=", 1)
        values = []
        for tok in raw.split(","):
            if not tok.strip():
                continue
            try:
                values.append(json.loads(tok))
            except json.JSONDecodeError:
                values.append(tok)
        grid[key.strip()] = values
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("grid is empty", "--grid")
    return grid


def _cell_label(assign):
    return ";".join(f"{k}={json.dumps(v)}" for k, v in assign.items())


def cmd_sweep(args):
    grid = _parse_grid(args)
    base_raw = cfgmod.load_raw(args.config, list(args.set or []))
    if args.seeds:
        base_raw["seeds"] = _parse_seeds(args.seeds)
    if args.out:
        base_raw["out"] = args.out
    keys = list(grid)
    cells = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        assign = dict(zip(keys, combo))
        raw = json.loads(json.dumps(base_raw))
        for k, v in assign.items():
            cfgmod.apply_override(raw, [p for p in k.split(".") if p], v)
        cells.append((assign, cfgmod.resolve(raw, args.method)))  # validate every cell up front
    out = cells[0][1]["out"]
    os.makedirs(out, exist_ok=True)
    rows = []
    for i, (assign, resolved) in enumerate(cells):
        cell_dir = os.path.join(out, f"cell_{i:03d}")
        os.makedirs(cell_dir, exist_ok=True)
        _write_json(os.path.join(cell_dir, "config.resolved.json"), resolved)
        results = _run_seeds(resolved, cell_dir, args.workers, prefix=f"cell{i:03d}-")
        _write_json(os.path.join(cell_dir, "summary.json"), summarize(results))
        final_ood = [read_metrics(os.path.join(cell_dir, f"seed_{s}", "metrics.csv"))[-1]["ood_acc"]
                     for s in resolved["seeds"]]
        stats = mean_sd(final_ood)
        rows.append([i, _cell_label(assign), stats["n"], repr(stats["mean"]), repr(stats["sd"])])
        print(f"cell {i}: {_cell_label(assign)} ood {stats['mean']:.4f} +- {stats['sd']:.4f}")
    with open(os.path.join(out, "sweep.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cell", "params", "n_seeds", "mean_ood_acc", "sd_ood_acc"])
        writer.writerows(rows)
    return EXIT_OK


BOUND_DEFAULTS = {
    "scm": None,
    "alphas": [1.0, 1.0, 1.0],
    "sigma_test": 0.3,
    "delta": 2.0,
    "c": None,
    "epsilon": 0.0,
    "beta0": 0.0,
    "gamma": 0.0,
    "sigma_erm": 1.0,
    "seeds": [0, 1, 2, 3, 4],
    "n_train_per_env": 500,
    "n_test": 2000,
    "train": None,
    "out": "bound",
}


def resolve_bound(raw):
    cfgmod._check_keys(raw, BOUND_DEFAULTS, "")
    b = {**BOUND_DEFAULTS, **raw}
    try:
        scm = SCMConfig.from_dict(b["scm"]) if b["scm"] is not None else bound_scm()
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad SCM description: {exc}", "scm") from None
    b["scm"] = scm.to_dict()
    if b["train"] is not None:
        cfgmod._check_keys(b["train"], cfgmod.TRAIN_FIELDS, "train")
        try:
            TrainConfig(**b["train"])
        except ConfigError as exc:
            raise ConfigError(exc.message, f"train.{exc.path}" if exc.path else "train") from None
    return scm, b


def cmd_bound(args):
    raw = cfgmod.load_raw(args.config, list(args.set or []))
    if args.out:
        raw["out"] = args.out
    if args.seeds:
        raw["seeds"] = _parse_seeds(args.seeds)
    scm, b = resolve_bound(raw)
    p = bound_params_for(scm, b["alphas"], b["sigma_test"], b["delta"], b["c"], b["epsilon"],
                         b["beta0"], b["gamma"], b["sigma_erm"])
    cfg = TrainConfig(**b["train"]) if b["train"] is not None else None
    report = bound_report(scm, b["alphas"], b["sigma_test"], p, cfg, empirical=not args.no_empirical,
                          seeds=b["seeds"], n_train_per_env=b["n_train_per_env"], n_test=b["n_test"])
    report["config"] = b
    os.makedirs(b["out"], exist_ok=True)
    _write_json(os.path.join(b["out"], "bound_report.json"), report)
    line = f"bound {report['bound']:.6f}, conditions satisfied: {report['conditions']['all_satisfied']}"
    if "empirical" in report:
        line += f", empirical risk {report['empirical']['empirical_risk_mean']:.4f}"
    print(line)
    return EXIT_OK


def cmd_gen_data(args):
    resolved = _resolve_from_args(args)
    out = resolved["out"]
    os.makedirs(out, exist_ok=True)
    manifest = {"config": resolved["data"], "eval": resolved["eval"], "files": []}
    for seed in resolved["seeds"]:
        train_set, test_set = build_datasets(resolved, seed)
        for split, ds in (("train", train_set), ("test", test_set)):
            name = f"{split}_seed{seed}.bin"
            save_dataset(ds, os.path.join(out, name))
            manifest["files"].append({"file": name, "split": split, "seed": seed, "n": len(ds),
                                      "shape": list(ds.X.shape)})
    _write_json(os.path.join(out, "datasets.json"), manifest)
    print(f"gen-data: wrote {len(manifest['files'])} dump(s) to {out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="irss", description="Style-aligned invariant risk experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, method=True, seeds=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="PATH=VALUE",
                       help="dotted override, value parsed as JSON (repeatable)")
        p.add_argument("--out", help="output directory")
        if seeds:
            p.add_argument("--seeds", help="comma list or range, e.g. 0,1,2 or 0-4")
        if method:
            p.add_argument("--method", choices=METHODS, help="loss-weight preset")
        p.add_argument("--workers", type=int, default=4, help="threads for per-seed runs")

    common(sub.add_parser("run", help="train and evaluate every seed"))
    sw = sub.add_parser("sweep", help="grid over config values")
    common(sw)
    sw.add_argument("--grid", action="append", metavar="PATH=V1,V2", help="grid axis (repeatable)")
    sw.add_argument("--grid-file", help="JSON object mapping dotted paths to value lists")
    bd = sub.add_parser("bound", help="risk lower bound report")
    common(bd, method=False)
    bd.add_argument("--no-empirical", action="store_true", help="skip the training confrontation")
    common(sub.add_parser("gen-data", help="dump the seeded train/test datasets"), method=False)
    return parser


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "bound": cmd_bound, "gen-data": cmd_gen_data}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (IRSSError, OSError, ValueError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
