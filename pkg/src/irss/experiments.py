"""Seeded dataset construction and single-run execution for resolved configs."""
from __future__ import annotations

import csv
import io
import json
import math
import os

import numpy as np

from .config import build_architecture, train_config
from .synthdata import (SCMConfig, StyleImageConfig, make_ood_test_env, sample_scm, sample_scm_envs,
                        sample_styled_images, Dataset)
from .trainer import METRIC_FIELDS, evaluate, train

DATA_TAG, TEST_TAG = 11, 12


def _data_seed(seed, tag):
    return int(np.random.SeedSequence((seed, tag)).generate_state(1)[0])


def build_datasets(resolved, seed):
    """Training set (all environments) and held-out OOD test set for one seed."""
    data, ev = resolved["data"], resolved["eval"]
    train_seed, test_seed = _data_seed(seed, DATA_TAG), _data_seed(seed, TEST_TAG)
    if data["kind"] == "scm":
        scm = SCMConfig.from_dict(data["scm"])
        test_env = make_ood_test_env(scm, ev["alphas"], ev["sigma_test"])
        train_set = sample_scm_envs(scm, data["n_per_env"], train_seed)
        test_set = sample_scm(scm.with_envs([test_env.env]), 0, data["n_test"], test_seed)
        test_set.true_env[:] = scm.k
        return train_set, test_set
    cfg = StyleImageConfig(**data["images"])
    seeds = np.random.SeedSequence(train_seed).spawn(len(cfg.rho))
    train_set = Dataset.concat(sample_styled_images(cfg, e, data["n_per_env"], s) for e, s in enumerate(seeds))
    test_set = sample_styled_images(cfg, 0, data["n_test"], test_seed, rho=ev["rho_test"])
    test_set.true_env[:] = len(cfg.rho)
    return train_set, test_set


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite metric {value}")
        return repr(value)
    return str(value)


def metrics_csv(rows):
    """Serialise MetricsRows with a fixed column order and exact float repr."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for row in rows:
        writer.writerow([_fmt(getattr(row, f)) for f in METRIC_FIELDS])
    return buf.getvalue()


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        parsed = {}
        for k, v in r.items():
            if k == "run_id":
                parsed[k] = v
            elif k in ("seed", "iter"):
                parsed[k] = int(v)
            else:
                parsed[k] = float(v) if v != "" else None
        out.append(parsed)
    return out


def run_one(resolved, seed, run_dir, run_id=None):
    """Train and evaluate one seed, writing ``metrics.csv`` inside ``run_dir``."""
    os.makedirs(run_dir, exist_ok=True)
    run_id = run_id or f"seed{seed}"
    train_set, test_set = build_datasets(resolved, seed)
    arch = build_architecture(resolved)
    cfg = train_config(resolved, seed)
    state = train(train_set, arch, cfg, test_set=test_set, run_id=run_id)
    with open(os.path.join(run_dir, "metrics.csv"), "w", newline="") as fh:
        fh.write(metrics_csv(state.history))
    ev_train = evaluate(state.params, arch, train_set)
    ev_test = evaluate(state.params, arch, test_set)
    result = {
        "seed": seed,
        "train_acc": ev_train.accuracy,
        "ood_acc": ev_test.accuracy,
        "style_probe_acc": ev_train.style_probe_acc,
        "train_acc_per_env": {str(k): v for k, v in ev_train.per_env.items()},
        "iterations": state.iter,
    }
    with open(os.path.join(run_dir, "result.json"), "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    return result


def mean_sd(values):
    values = [v for v in values if v is not None]
    if not values:
        return {"mean": None, "sd": None, "n": 0}
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "sd": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0, "n": len(arr)}


def summarize(results):
    results = sorted(results, key=lambda r: r["seed"])
    return {
        "per_seed": results,
        **{key: mean_sd([r[key] for r in results]) for key in ("train_acc", "ood_acc", "style_probe_acc")},
    }
