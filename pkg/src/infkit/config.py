"""Run configuration: a flat ``section.key = value`` document.

Precedence, lowest first: built-in defaults, config file, ``INFKIT_*``
environment variables, command-line flags. Unknown keys are errors at every
level. ``INFKIT_HYPER__LR=0.05`` sets ``hyper.lr``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import replace

from .errors import ConfigError
from .evaluation import REFERENCE_FLIP, REFERENCE_HYPER, REFERENCE_TASK
from .influence import DampingConfig
from .trainer import ModelSpec, SyntheticTask, TrainHyper

ENV_PREFIX = "INFKIT_"

DEFAULTS: dict = {
    "task.kind": REFERENCE_TASK.kind,
    "task.classes": REFERENCE_TASK.classes,
    "task.feature_dim": REFERENCE_TASK.feature_dim,
    "task.separation": REFERENCE_TASK.separation,
    "task.noise": REFERENCE_TASK.noise,
    "task.n_train": REFERENCE_TASK.n_train,
    "task.n_val": REFERENCE_TASK.n_val,
    "task.n_test": REFERENCE_TASK.n_test,
    "task.sources": REFERENCE_TASK.sources,
    "task.source_spread": REFERENCE_TASK.source_spread,
    "task.orthogonal_blocks": REFERENCE_TASK.orthogonal_blocks,
    "task.latent_dim": REFERENCE_TASK.latent_dim,
    "task.ambient_noise": REFERENCE_TASK.ambient_noise,
    "model.arch": "logreg",
    "model.hidden": 32,
    "hyper.lr": REFERENCE_HYPER.lr,
    "hyper.momentum": REFERENCE_HYPER.momentum,
    "hyper.weight_decay": REFERENCE_HYPER.weight_decay,
    "hyper.epochs": REFERENCE_HYPER.epochs,
    "hyper.batch_size": REFERENCE_HYPER.batch_size,
    "run.method": "dropout",
    "run.methods": "orig,dropout,gaussian,fjlt,pca,logra,datainf,lissa,hessian_free",
    "run.r": None,
    "run.r_values": "1,2,4,8,16",
    "run.seed": 0,
    "run.seeds": 5,
    "run.flip": REFERENCE_FLIP,
    "run.damping": "paper_rule",
    "run.lissa_iterations": 10,
    "run.block_mode": "per_layer",
    "run.fractions": "0.25",
    "run.mode": "remove_top",
    "run.query_split": "val",
    "run.dtype": "f32",
    "run.workers": 0,
    "run.out": None,
}

# Keys whose default is None still need a type.
_TYPES = {"task.latent_dim": int, "run.r": int, "run.out": str}


def _convert(key: str, text):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(text, str):
        return text
    text = text.strip()
    default = DEFAULTS[key]
    if text.lower() in ("none", "null", "") and (default is None or key in _TYPES):
        return None
    kind = _TYPES.get(key, type(default))
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``[section]`` headers prefix later keys; ``#`` starts a comment."""
    out, section = {}, ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if section and "." not in key:
            key = f"{section}.{key}"
        out[key] = _convert(key, value)
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower().replace("__", ".")
            out[key] = _convert(key, value)
    return out


def parse_assignments(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = _convert(key.strip(), value)
    return out


def resolve(path=None, environ=None, flags: dict | None = None, preset: dict | None = None) -> dict:
    """Merge defaults, an optional command preset, the file, the environment and flags."""
    cfg = dict(DEFAULTS)
    cfg.update(preset or {})
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg.update(parse_config_text(fh.read()))
    cfg.update(env_overrides(environ))
    cfg.update({k: _convert(k, v) for k, v in (flags or {}).items()})
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]


# -- typed views --------------------------------------------------------------

def int_list(text) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


def seed_list(value) -> list[int]:
    """``5`` means seeds 0..4; ``3,7,11`` lists them."""
    text = str(value)
    return int_list(text) if "," in text else list(range(int(text)))


def task_of(cfg: dict, seed: int | None = None) -> SyntheticTask:
    fields = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("task.")}
    task = SyntheticTask(**fields)
    return task if seed is None else replace(task, seed=seed)


def model_of(cfg: dict) -> ModelSpec:
    return ModelSpec(cfg["model.arch"], in_dim=cfg["task.feature_dim"], classes=cfg["task.classes"],
                     hidden=cfg["model.hidden"])


def hyper_of(cfg: dict, seed: int = 0) -> TrainHyper:
    return TrainHyper(cfg["hyper.lr"], cfg["hyper.momentum"], cfg["hyper.weight_decay"],
                      cfg["hyper.epochs"], cfg["hyper.batch_size"], seed)


def damping_of(cfg: dict) -> DampingConfig:
    try:
        return DampingConfig.parse(cfg["run.damping"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
