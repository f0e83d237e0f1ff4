"""
Run configuration: plain-text ``section.key = value`` files plus overrides.

Every key has a typed default below. Keys in the ``runtime`` section only
affect how a run executes (worker count, output paths), never its results,
and are left out of report provenance.
"""

from __future__ import annotations

import os
from pathlib import Path

from .errors import ConfigError

SEED_ENV = "CERTISMOOTH_SEED"

DEFAULTS: dict[str, object] = {
    "run.seed": 0,
    "runtime.workers": 1,
    "runtime.output": "report.json",
    "schedule.kind": "cosine",
    "schedule.T": 1000,
    "data.source": "gmm",
    "data.K": 4,
    "data.d": 64,
    "data.gamma": 0.08,
    "data.world_seed": 0,
    "data.n_eval": 200,
    "data.n_train": 1000,
    "data.csv": "",
    "data.csv_train": "",
    "smoothing.sigma": 0.25,
    "smoothing.n0": 100,
    "smoothing.n": 10_000,
    "smoothing.alpha": 0.001,
    "smoothing.batch": 1000,
    "smoothing.n_predict": 100,
    "denoiser.kind": "analytic",
    "denoiser.checkpoint": "",
    "denoiser.k": 1.8,
    "denoiser.cond": "empty",
    "classifier.kind": "neural",
    "classifier.checkpoint": "",
    "classifier.hidden": "64",
    "classifier.steps": 1500,
    "classifier.lr": 0.05,
    "classifier.seed": 0,
    "report.epsilons": "0,0.25,0.5,0.75,1.0,1.25",
    "attack.epsilons": "0.5,1.0",
    "attack.steps": 100,
    "attack.m_test": 32,
    "attack.certify": True,
    "adapt.lambda": 0.01,
    "adapt.steps": 500,
    "adapt.classifier_steps": 500,
    "adapt.lr_denoiser": 0.01,
    "adapt.lr_classifier": 0.001,
    "adapt.momentum": 0.9,
    "adapt.batch": 32,
    "adapt.mode": "staged",
    "adapt.shots": 1,
    "ablate.k_grid": "0.5,1.0,1.8",
    "pretrain.data": "world",
    "pretrain.n_train": 2000,
    "pretrain.steps": 4000,
    "pretrain.lr": 0.01,
    "pretrain.batch": 64,
    "pretrain.hidden": "128,128",
    "pretrain.blur": 5,
    "runtime.checkpoint_dir": "",
}


def _coerce(key: str, raw):
    default = DEFAULTS[key]
    if isinstance(raw, type(default)) and not isinstance(raw, str):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def parse_text(text: str, origin: str = "<config>") -> dict[str, object]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected 'section.key = value'")
        if key not in DEFAULTS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def load_config(path=None, overrides=(), env=None) -> dict[str, object]:
    """Defaults, then the config file, then ``section.key=value`` overrides, then the seed env var."""
    cfg = dict(DEFAULTS)
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} not found")
        cfg.update(parse_text(p.read_text(), str(path)))
    for item in overrides:
        key, sep, value = item.partition("=")
        key = key.strip().lstrip("-")
        if not sep or key not in DEFAULTS:
            raise ConfigError(f"bad override {item!r}")
        cfg[key] = _coerce(key, value)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        cfg["run.seed"] = _coerce("run.seed", env[SEED_ENV])
    return cfg


def provenance(cfg: dict) -> dict:
    """Config echo used in reports (result-affecting keys only)."""
    return {k: v for k, v in sorted(cfg.items()) if not k.startswith("runtime.")}


def to_text(cfg: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(cfg.items()))


def float_list(text) -> list[float]:
    text = str(text).strip()
    return [float(v) for v in text.split(",") if v.strip()] if text else []


def int_list(text) -> list[int]:
    text = str(text).strip()
    return [int(v) for v in text.split(",") if v.strip()] if text else []
