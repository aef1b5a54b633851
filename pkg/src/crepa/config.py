"""Experiment configuration: one JSON document with per-module sections.

Values left as ``null`` in the file (or absent) fall back to defaults;
geometry-dependent fields (model height, encoder grid, ...) are derived
from the data section unless set explicitly. The CLI layers dotted-key
overrides (``training.lr=0.003``) on top.
"""

from __future__ import annotations

import copy
import json

from .errors import ConfigError

DEFAULTS: dict = {
    "run": {"seed": 0},
    "data": {"n_per_class": 4, "frames": 8, "size": 32, "master_seed": 0, "classes": None},
    "encoder": {
        "grid": None, "feature_dim": 32, "pretext": "attribute-classification",
        "trunk_width": 32, "post_norm": True,
        "steps": 400, "batch_size": 64, "lr": 2e-3,
    },
    "dit": {
        "depth": 8, "dim": 128, "heads": 4, "patch": 4,
        "tap_layer": 4, "class_conditioning": True, "temporal_pos_embed": True,
        "tap_point": "block_output",
    },
    "diffusion": {"t_steps": 100, "beta_min": 1e-4, "beta_max": 0.2},
    "alignment": {
        "mode": "crepa", "lambda": 0.5, "d": 1, "tau": 1.0, "tap_layer": None,
        "sim": "cosine-mean-token", "normalize_by_frames": False,
        "renormalize_boundary": False,
    },
    "pretrain": {"steps": 3000, "batch_size": 4, "lr": 1e-3},
    "training": {
        "steps": 2000, "batch_size": 4, "lr": 1e-3, "eval_every": 250,
        "lora_rank": 4, "lora_alpha": 8.0, "classes": [0],
        "sweep_k": 10, "sweep_timesteps": 8,
    },
    "sample": {"n": 4, "mode": "deterministic", "class_id": 0},
    "probe": {"layers": None, "steps": 500, "lr": 0.5},
    "sweep": {"k": 10, "n_timesteps": 8, "offsets": [-1, 0, 1]},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=()) -> dict:
    """Read a config file (defaults when omitted), apply dotted-key overrides,
    then resolve derived fields."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config parse failure in {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config root must be an object; got {type(doc).__name__}")
        cfg = _merge(cfg, doc)
    return apply_overrides(cfg, list(overrides))


def resolve(cfg: dict) -> dict:
    """Fill geometry-derived defaults and cross-check sections."""
    cfg = copy.deepcopy(cfg)
    size = cfg["data"]["size"]
    patch = cfg["dit"]["patch"]
    if size % patch:
        raise ConfigError(f"data.size {size} not divisible by dit.patch {patch}")
    if cfg["encoder"]["grid"] is None:
        cfg["encoder"]["grid"] = size // patch
    if cfg["alignment"]["tap_layer"] is None:
        cfg["alignment"]["tap_layer"] = cfg["dit"]["tap_layer"]
    return cfg


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values parse as JSON, else strings."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config section {part!r} in override {item!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return resolve(cfg)
