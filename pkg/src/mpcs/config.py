"""Layered configuration: preset <- config file <- command-line overrides.

Schema (YAML or JSON)::

    seed: 0
    encoder: {name: small_cnn, weights: null}
    sampler: {kind: ordered, fixed: [200, 400], lookup: null}
    loss: {temperature: 0.01, exclude_positive: false}
    pretrain: {epochs, batch_size, learning_rate, optimizer, input_size, weight_decay, checkpoint_every}
    finetune: {epochs, batch_size, learning_rate, input_size, dropout, label_fraction, mode, patience,
               magnifications, eval_magnifications}
    transforms: {pretrain: {...TransformPolicy fields}, finetune: {...}}
    split: {k: 5, ssl_portion: train}
"""
from __future__ import annotations

import copy
import json
from pathlib import Path

import yaml

from .errors import ConfigError
from .sampler import PairStrategy
from .train import FinetuneConfig, PretrainConfig

_COMMON = {
    "seed": 0,
    "sampler": {"kind": "ordered", "fixed": [200, 400], "lookup": None},
    "loss": {"temperature": 0.01, "exclude_positive": False},
    "transforms": {"pretrain": {}, "finetune": {}},
    "split": {"k": 5, "ssl_portion": "train"},
}

_REFERENCE_FINETUNE = {
    "epochs": 100, "batch_size": 32, "learning_rate": 2e-5, "input_size": 224, "dropout": 0.3,
    "label_fraction": 1.0, "mode": "full", "patience": 10,
}

_SYNTH_PRETRAIN = {"batch_size": 16, "learning_rate": 1e-3, "optimizer": "adam", "input_size": 64,
                   "weight_decay": 0.0, "checkpoint_every": 0}
_SYNTH_FINETUNE = {"epochs": 100, "batch_size": 32, "learning_rate": 1e-3, "input_size": 64, "dropout": 0.3,
                   "label_fraction": 1.0, "mode": "full", "patience": 20}

PRESETS = {
    "paper-effnet": {
        "encoder": {"name": "efficientnet_b2", "weights": None},
        "pretrain": {"epochs": 1000, "batch_size": 128, "learning_rate": 1e-5, "optimizer": "adam",
                     "input_size": 341, "weight_decay": 0.0, "checkpoint_every": 50},
        "finetune": dict(_REFERENCE_FINETUNE),
    },
    "paper-resnet": {
        "encoder": {"name": "resnet50", "weights": None},
        "pretrain": {"epochs": 1000, "batch_size": 1024, "learning_rate": 1e-5, "optimizer": "lars",
                     "input_size": 224, "weight_decay": 1e-6, "checkpoint_every": 50},
        "finetune": dict(_REFERENCE_FINETUNE),
    },
    # desk-scale budgets scaled down from the 1000-epoch reference
    "synth-fast": {
        "encoder": {"name": "small_cnn", "weights": None},
        "pretrain": dict(_SYNTH_PRETRAIN, epochs=20),
        "finetune": dict(_SYNTH_FINETUNE),
    },
    "synth-full": {
        "encoder": {"name": "small_cnn", "weights": None},
        "pretrain": dict(_SYNTH_PRETRAIN, epochs=200),
        "finetune": dict(_SYNTH_FINETUNE),
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    text = path.read_text()
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must hold a mapping at top level")
    return doc


def resolve(preset: str = "synth-fast", config_file=None, overrides: dict | None = None) -> dict:
    """Merge preset, file and overrides; later layers win key by key."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = deep_merge(_COMMON, PRESETS[preset])
    cfg["preset"] = preset
    if config_file is not None:
        cfg = deep_merge(cfg, load_config_file(config_file))
    cfg = deep_merge(cfg, overrides or {})
    return cfg


def override(path: str, value) -> dict:
    """``override("pretrain.epochs", 5)`` -> ``{"pretrain": {"epochs": 5}}``."""
    out: dict = {}
    node = out
    parts = path.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def parse_set(items) -> dict:
    """``["a.b=3", "c=x"]`` -> nested dict with YAML-typed values."""
    result: dict = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        result = deep_merge(result, override(key.strip(), yaml.safe_load(raw)))
    return result


def strategy_from(cfg: dict) -> PairStrategy:
    try:
        return PairStrategy.from_config(cfg["sampler"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def pretrain_config(cfg: dict) -> PretrainConfig:
    p = cfg["pretrain"]
    try:
        return PretrainConfig(
            strategy=strategy_from(cfg),
            epochs=int(p["epochs"]),
            batch_size=int(p["batch_size"]),
            learning_rate=float(p["learning_rate"]),
            optimizer=p["optimizer"],
            temperature=float(cfg["loss"]["temperature"]),
            input_size=int(p["input_size"]),
            seed=int(cfg["seed"]),
            encoder=cfg["encoder"]["name"],
            encoder_weights=cfg["encoder"].get("weights"),
            weight_decay=float(p.get("weight_decay", 0.0)),
            exclude_positive=bool(cfg["loss"].get("exclude_positive", False)),
            transforms=dict(cfg["transforms"].get("pretrain") or {}),
            checkpoint_every=int(p.get("checkpoint_every", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid pretrain configuration: {exc}") from exc


def finetune_config(cfg: dict, mode: str | None = None) -> FinetuneConfig:
    f = cfg["finetune"]
    try:
        return FinetuneConfig(
            learning_rate=float(f["learning_rate"]),
            batch_size=int(f["batch_size"]),
            input_size=int(f["input_size"]),
            dropout=float(f["dropout"]),
            label_fraction=float(f["label_fraction"]),
            mode=mode or f["mode"],
            seed=int(cfg["seed"]),
            epochs=int(f["epochs"]),
            patience=int(f.get("patience", 0)),
            magnifications=f.get("magnifications"),
            eval_magnifications=f.get("eval_magnifications"),
            encoder=cfg["encoder"]["name"],
            encoder_weights=cfg["encoder"].get("weights"),
            transforms=dict(cfg["transforms"].get("finetune") or {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid finetune configuration: {exc}") from exc
