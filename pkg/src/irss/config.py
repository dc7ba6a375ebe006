"""Experiment configuration: JSON sections, dotted overrides, strict validation.

A config has the sections ``data``, ``model``, ``train``, ``eval`` plus the
scalars ``method``, ``out`` and ``seeds``. Every key is checked against the
known schema and unknown ones are rejected with their dotted path.
:func:`resolve` fills all defaults so that the written
``config.resolved.json`` reloads to the identical dict.
"""
from __future__ import annotations

import copy
import dataclasses
import json

from .diffcore import Architecture, conv_architecture, mlp_architecture
from .errors import ConfigError, IRSSError
from .synthdata import SCMConfig, StyleImageConfig, default_scm
from .trainer import PRESETS, TrainConfig

DATA_KINDS = ("scm", "images")
MODEL_KINDS = ("mlp", "conv", "custom")

DATA_DEFAULTS = {
    "kind": "scm",
    "n_per_env": 500,
    "n_test": 2000,
    "scm": None,
    "mixing_seed": 0,
    "images": None,
}
MODEL_DEFAULTS = {
    "kind": None,
    "hidden": [16],
    "channels": [4, 8],
    "feature_dim": 8,
    "bounded": True,
    "architecture": None,
}
EVAL_DEFAULTS = {
    "alphas": None,
    "sigma_test": 0.3,
    "rho_test": 0.1,
}
TOP_DEFAULTS = {"method": None, "out": "runs", "seeds": [0]}
TRAIN_FIELDS = [f.name for f in dataclasses.fields(TrainConfig)]


def _check_keys(section, allowed, path):
    if not isinstance(section, dict):
        raise ConfigError(f"expected an object, got {type(section).__name__}", path)
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r}", f"{path}.{key}" if path else key)


def parse_override(text):
    """``a.b.c=value`` -> (["a", "b", "c"], value); the value is JSON, else a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form path=value", "--set")
    path, raw = text.split("=", 1)
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"override {text!r} has an empty path", "--set")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return keys, value


def apply_override(raw, keys, value):
    node = raw
    for i, key in enumerate(keys[:-1]):
        nxt = node.get(key)
        if nxt is None:
            nxt = node[key] = {}
        if not isinstance(nxt, dict):
            raise ConfigError("cannot descend into a non-object", ".".join(keys[: i + 1]))
        node = nxt
    node[keys[-1]] = value


def load_raw(path=None, overrides=()):
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", "--config") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", "--config") from None
    for text in overrides:
        apply_override(raw, *parse_override(text))
    return raw


def _data_section(raw):
    _check_keys(raw, DATA_DEFAULTS, "data")
    d = {**DATA_DEFAULTS, **raw}
    if d["kind"] not in DATA_KINDS:
        raise ConfigError(f"must be one of {DATA_KINDS}", "data.kind")
    for name in ("n_per_env", "n_test"):
        if not isinstance(d[name], int) or d[name] < 1:
            raise ConfigError("must be a positive integer", f"data.{name}")
    if d["kind"] == "scm":
        try:
            scm = SCMConfig.from_dict(d["scm"]) if d["scm"] is not None else default_scm(int(d["mixing_seed"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad SCM description: {exc}", "data.scm") from None
        except ConfigError as exc:
            raise ConfigError(exc.message, "data.scm" + (f".{exc.path}" if exc.path else "")) from None
        d["scm"] = scm.to_dict()
        d["images"] = None
    else:
        try:
            images = StyleImageConfig(**(d["images"] or {}))
        except TypeError as exc:
            raise ConfigError(str(exc), "data.images") from None
        except ConfigError as exc:
            raise ConfigError(exc.message, f"data.images.{exc.path}" if exc.path else "data.images") from None
        d["images"] = images.to_dict()
        d["scm"] = None
    return d


def _model_section(raw, data):
    _check_keys(raw, MODEL_DEFAULTS, "model")
    m = {**MODEL_DEFAULTS, **raw}
    if m["kind"] is None:
        m["kind"] = "mlp" if data["kind"] == "scm" else "conv"
    if m["kind"] not in MODEL_KINDS:
        raise ConfigError(f"must be one of {MODEL_KINDS}", "model.kind")
    return m


def _eval_section(raw, data):
    _check_keys(raw, EVAL_DEFAULTS, "eval")
    e = {**EVAL_DEFAULTS, **raw}
    if data["kind"] == "scm":
        k = len(data["scm"]["envs"])
        if e["alphas"] is None:
            e["alphas"] = [1.0] + [0.0] * (k - 1)
        if len(e["alphas"]) != k:
            raise ConfigError(f"need {k} alphas", "eval.alphas")
        if not e["sigma_test"] > 0:
            raise ConfigError("must be > 0", "eval.sigma_test")
    elif not 0.0 <= e["rho_test"] <= 1.0:
        raise ConfigError("must lie in [0, 1]", "eval.rho_test")
    return e


def resolve(raw, method=None):
    """Validate a raw config dict and return the fully explicit resolved form.

    Training settings are layered as: TrainConfig defaults, then the method
    preset, then the ``train`` section. A ``--method`` flag wins over the
    file's ``method`` key.
    """
    raw = copy.deepcopy(raw)
    _check_keys(raw, {"data", "model", "train", "eval", *TOP_DEFAULTS}, "")
    data = _data_section(raw.get("data") or {})
    model = _model_section(raw.get("model") or {}, data)
    evaluation = _eval_section(raw.get("eval") or {}, data)
    method = method or raw.get("method")
    if method is not None and method not in PRESETS:
        raise ConfigError(f"unknown method {method!r}; choose from {tuple(PRESETS)}", "method")
    train_raw = raw.get("train") or {}
    _check_keys(train_raw, TRAIN_FIELDS, "train")
    try:
        train = TrainConfig(**{**(PRESETS[method] if method else {}), **train_raw})
    except ConfigError as exc:
        raise ConfigError(exc.message, f"train.{exc.path}" if exc.path else "train") from None
    except TypeError as exc:
        raise ConfigError(str(exc), "train") from None
    seeds = raw.get("seeds", TOP_DEFAULTS["seeds"])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("must be a non-empty list of non-negative integers", "seeds")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("duplicate seeds", "seeds")
    out = raw.get("out", TOP_DEFAULTS["out"])
    if not isinstance(out, str) or not out:
        raise ConfigError("must be a non-empty path", "out")
    resolved = {
        "data": data, "model": model, "train": train.to_dict(), "eval": evaluation,
        "method": method, "out": out, "seeds": seeds,
    }
    build_architecture(resolved)  # validates the model section against the data
    return resolved


def data_shape(resolved):
    data = resolved["data"]
    if data["kind"] == "scm":
        scm = data["scm"]
        return (len(scm["mu_c"]) + len(scm["envs"][0]["mu_e"]),), 2, 1
    img = data["images"]
    return (3, img["side"], img["side"]), img["n_classes"], len(img["styles"])


def build_architecture(resolved):
    m = resolved["model"]
    shape, n_classes, _ = data_shape(resolved)
    S = resolved["train"]["S"]
    try:
        if m["kind"] == "custom" or m["architecture"] is not None:
            if m["architecture"] is None:
                raise ConfigError("custom model needs an architecture", "model.architecture")
            arch = Architecture.from_dict(m["architecture"])
            if arch.input_shape != tuple(shape):
                raise ConfigError(f"input shape {arch.input_shape} != data shape {tuple(shape)}",
                                  "model.architecture.input_shape")
            if arch.n_styles != S:
                arch = dataclasses.replace(arch, n_styles=S)
            return arch
        if m["kind"] == "mlp":
            if len(shape) != 1:
                raise ConfigError("mlp model needs flat data", "model.kind")
            return mlp_architecture(shape[0], tuple(m["hidden"]), m["feature_dim"], n_classes, S)
        if len(shape) != 3:
            raise ConfigError("conv model needs image data", "model.kind")
        return conv_architecture(shape, tuple(m["channels"]), m["feature_dim"], n_classes, S, m["bounded"])
    except ConfigError as exc:
        if exc.path and exc.path.startswith("model"):
            raise
        raise ConfigError(exc.message, "model") from None
    except (IRSSError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "model") from None


def train_config(resolved, seed):
    return TrainConfig(**{**resolved["train"], "seed": seed})
