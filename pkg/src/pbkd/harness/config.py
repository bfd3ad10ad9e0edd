"""Experiment configuration: a versioned YAML tree with strict keys.

Every section has a fixed set of keys with defaults. Unknown keys, wrong
types and out-of-range values raise ``ConfigInvalid`` naming the dotted
field. The resolved tree (defaults filled in) is what gets snapshotted next
to each run, so re-running from the snapshot reproduces the run.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
import re
from pathlib import Path
from typing import Any

import yaml

from pbkd.errors import ConfigInvalid
from pbkd.pbkd_offline import OfflineConfig
from pbkd.pbkd_online import OnlineConfig

SCHEMA = "pbkd-experiment/1"
ALGORITHMS = ("bc", "best-of-n", "pbkd-offline", "pbkd-online", "mm-offline", "mm-online")
OUT_ENV = "PBKD_OUT"

_REQUIRED = object()

MDP_DEFAULTS = {
    "vocab_size": 3,
    "horizon": 3,
    "prompt_count": 4,
    "feature_dim": 8,
    "gamma": 1.0,
    "context_len": 2,
    "feature_seed": 1,
}
ORACLE_DEFAULTS = {"seed": 123, "norm": 1.8, "bound": 2.0, "theta": None}
TEACHER_DEFAULTS = {"theta": None, "perturb": 0.0, "norm": None, "temperature": None}
ANNOTATOR_DEFAULTS = {"kind": "uniform", "temperature": None}
DATASET_DEFAULTS = {
    "kind": "offline",
    "n": 1000,
    "path": None,
    "mu0": {"kind": "teacher", "temperature": 2.0},
    "mu1": {"kind": "uniform", "temperature": None},
}
STUDENT_DEFAULTS = {"init": "uniform", "demos": 200, "l2": 0.0}
BC_DEFAULTS = {"epochs": 300, "lr": 1.0, "l2": 0.0}
BEST_OF_N_DEFAULTS = {"n": 8, "eval_samples": 2000}


def _dataclass_defaults(cls) -> dict[str, Any]:
    return {f.name: f.default for f in dataclasses.fields(cls)}


OFFLINE_DEFAULTS = _dataclass_defaults(OfflineConfig)
ONLINE_DEFAULTS = {**_dataclass_defaults(OnlineConfig), "warm_start": None}

PARAM_DEFAULTS = {
    "bc": BC_DEFAULTS,
    "best-of-n": BEST_OF_N_DEFAULTS,
    "pbkd-offline": OFFLINE_DEFAULTS,
    "pbkd-online": ONLINE_DEFAULTS,
    "mm-offline": OFFLINE_DEFAULTS,
    "mm-online": ONLINE_DEFAULTS,
}

TOP_DEFAULTS = {
    "schema": SCHEMA,
    "label": None,
    "algorithm": _REQUIRED,
    "seed": 0,
    "output_dir": None,
    "mdp": MDP_DEFAULTS,
    "oracle": ORACLE_DEFAULTS,
    "teacher": TEACHER_DEFAULTS,
    "dataset": DATASET_DEFAULTS,
    "student": STUDENT_DEFAULTS,
    "params": None,
}


def _merge(defaults: dict[str, Any], given: Any, path: str) -> dict[str, Any]:
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigInvalid(path, f"expected a mapping, got {type(given).__name__}")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigInvalid(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    out = {}
    for key, default in defaults.items():
        where = f"{path}.{key}" if path else key
        if key in given:
            value = given[key]
            if isinstance(default, dict):
                value = _merge(default, value, where)
        elif default is _REQUIRED:
            raise ConfigInvalid(where, "missing required key")
        else:
            value = copy.deepcopy(default)
        out[key] = value
    return out


def _expect(cond: bool, field: str, message: str) -> None:
    if not cond:
        raise ConfigInvalid(field, message)


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_numbers(section: dict[str, Any], defaults: dict[str, Any], path: str) -> None:
    """Type-check leaves against their default's type; ``None`` defaults accept anything."""
    for key, default in defaults.items():
        value = section[key]
        where = f"{path}.{key}"
        if default is None or isinstance(default, dict):
            continue
        if isinstance(default, bool):
            _expect(isinstance(value, bool), where, "expected true/false")
        elif isinstance(default, int):
            _expect(_is_int(value), where, "expected an integer")
        elif isinstance(default, float):
            _expect(_is_num(value), where, "expected a number")
        elif isinstance(default, str):
            _expect(isinstance(value, str), where, "expected a string")


def _check_annotator(spec: dict[str, Any], path: str) -> None:
    _expect(spec["kind"] in ("teacher", "uniform"), f"{path}.kind", "expected teacher or uniform")
    t = spec["temperature"]
    _expect(t is None or (_is_num(t) and t > 0), f"{path}.temperature", "expected a positive number or null")


def _check_theta(value: Any, d: int, path: str) -> None:
    if value is None:
        return
    _expect(isinstance(value, list) and all(_is_num(v) for v in value), path, "expected a list of numbers")
    _expect(len(value) == d, path, f"length {len(value)} does not match mdp.feature_dim = {d}")


def _sub_config(cls, params: dict[str, Any], path: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    try:
        return cls(**{k: v for k, v in params.items() if k in fields})
    except ValueError as exc:
        raise ConfigInvalid(path, str(exc)) from exc


def validate(raw: dict[str, Any]) -> dict[str, Any]:
    """Fill defaults and check every field; returns the resolved tree."""
    if not isinstance(raw, dict):
        raise ConfigInvalid("<root>", "config must be a mapping")
    cfg = _merge(TOP_DEFAULTS, raw, "")
    _expect(cfg["schema"] == SCHEMA, "schema", f"expected {SCHEMA!r}")
    algo = cfg["algorithm"]
    _expect(algo in ALGORITHMS, "algorithm", f"unknown algorithm {algo!r}; expected one of {', '.join(ALGORITHMS)}")
    _expect(_is_int(cfg["seed"]) and cfg["seed"] >= 0, "seed", "expected a non-negative integer")
    _expect(cfg["label"] is None or isinstance(cfg["label"], str), "label", "expected a string")
    _expect(cfg["output_dir"] is None or isinstance(cfg["output_dir"], str), "output_dir", "expected a path string")

    _check_numbers(cfg["mdp"], MDP_DEFAULTS, "mdp")
    mdp = cfg["mdp"]
    for key in ("vocab_size", "horizon", "prompt_count", "feature_dim", "context_len"):
        _expect(mdp[key] >= 1, f"mdp.{key}", "must be >= 1")
    _expect(0 < mdp["gamma"] <= 1, "mdp.gamma", "must lie in (0, 1]")
    d = mdp["feature_dim"]

    oracle = cfg["oracle"]
    _check_numbers(oracle, ORACLE_DEFAULTS, "oracle")
    _expect(oracle["bound"] > 0, "oracle.bound", "must be positive")
    _expect(0 < oracle["norm"] <= oracle["bound"], "oracle.norm", "must lie in (0, bound]")
    _check_theta(oracle["theta"], d, "oracle.theta")

    teacher = cfg["teacher"]
    _check_theta(teacher["theta"], d, "teacher.theta")
    _expect(_is_num(teacher["perturb"]) and teacher["perturb"] >= 0, "teacher.perturb", "must be >= 0")
    for key in ("norm", "temperature"):
        v = teacher[key]
        _expect(v is None or (_is_num(v) and v > 0), f"teacher.{key}", "expected a positive number or null")

    ds = cfg["dataset"]
    _expect(ds["kind"] in ("offline", "file", "none"), "dataset.kind", "expected offline, file or none")
    _expect(_is_int(ds["n"]) and ds["n"] >= 1, "dataset.n", "expected a positive integer")
    _expect(ds["kind"] != "file" or isinstance(ds["path"], str), "dataset.path", "file datasets need a path")
    for side in ("mu0", "mu1"):
        _check_annotator(ds[side], f"dataset.{side}")

    st = cfg["student"]
    _expect(st["init"] in ("uniform", "bc"), "student.init", "expected uniform or bc")
    _expect(_is_int(st["demos"]) and st["demos"] >= 1, "student.demos", "expected a positive integer")
    _expect(_is_num(st["l2"]) and st["l2"] >= 0, "student.l2", "must be >= 0")

    pdef = PARAM_DEFAULTS[algo]
    params = _merge(pdef, cfg["params"], "params")
    _check_numbers(params, pdef, "params")
    cfg["params"] = params
    if algo in ("pbkd-offline", "mm-offline"):
        _expect(ds["kind"] != "none", "dataset.kind", "offline algorithms need a dataset")
        _sub_config(OfflineConfig, params, "params")
    elif algo in ("pbkd-online", "mm-online"):
        _sub_config(OnlineConfig, params, "params")
        if params["warm_start"] is not None:
            _expect(ds["kind"] != "none", "dataset.kind", "a warm start needs an offline dataset")
            warm = _merge(OFFLINE_DEFAULTS, params["warm_start"], "params.warm_start")
            _check_numbers(warm, OFFLINE_DEFAULTS, "params.warm_start")
            _sub_config(OfflineConfig, warm, "params.warm_start")
            params["warm_start"] = warm
    elif algo == "bc":
        _expect(params["epochs"] >= 1, "params.epochs", "must be >= 1")
        _expect(params["lr"] > 0, "params.lr", "must be positive")
        _expect(params["l2"] >= 0, "params.l2", "must be >= 0")
    elif algo == "best-of-n":
        _expect(params["n"] >= 1, "params.n", "must be >= 1")
        _expect(params["eval_samples"] >= 1, "params.eval_samples", "must be >= 1")
        _expect(ds["kind"] != "none", "dataset.kind", "best-of-n scores candidates with a reward fitted to a dataset")
    return cfg


def with_overrides(cfg: dict[str, Any], **dotted: Any) -> dict[str, Any]:
    """Copy of a config with ``a.b.c=value`` style overrides (keys use ``__`` for dots)."""
    out = copy.deepcopy(cfg)
    for key, value in dotted.items():
        parts = key.split("__")
        node = out
        for p in parts[:-1]:
            if node.get(p) is None:
                node[p] = {}
            node = node[p]
        node[parts[-1]] = value
    return out


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-2`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def loads(text: str) -> dict[str, Any]:
    try:
        raw = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigInvalid("<file>", f"not valid YAML: {exc}") from exc
    return validate(raw)


def load(path: str | Path) -> dict[str, Any]:
    return loads(Path(path).read_text())


def dumps(cfg: dict[str, Any]) -> str:
    return yaml.safe_dump(cfg, sort_keys=False, default_flow_style=None)


def canonical(cfg: dict[str, Any]) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def run_id(cfg: dict[str, Any]) -> str:
    """Content hash of the resolved config minus its output location."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(canonical(body).encode()).hexdigest()[:12]


def output_root(cfg: dict[str, Any] | None = None, override: str | None = None) -> Path:
    if override:
        return Path(override)
    if cfg is not None and cfg.get("output_dir"):
        return Path(cfg["output_dir"])
    return Path(os.environ.get(OUT_ENV, "runs"))
