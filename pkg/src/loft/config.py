"""Run configuration: one JSON document drives every CLI subcommand.

The document is validated against the default tree below — unknown keys
are rejected with their full path, and every random draw in a run is
tied to an explicit seed in this file (nothing falls back to wall-clock
entropy).  `loft <cmd> --config run.json --train.lr 3e-4` style dotted
overrides patch individual keys; the fully resolved document is echoed
into the run directory as ``config.resolved.json`` so any run can be
reproduced from its own artifacts.

Sections:

    tm        n_in, n_out, seed            transmission-matrix shape
    dataset   pairs, levels, split, seed   training-pair generation
    train     mode, epochs, batch, lr, optimizer, val_split, seed,
              weights{dev, dis, content, content_gen}
    target    kind ("point" | "points"), row, col, points
    eval      baseline_draws, seed
    optimize  method ("conj" | "csa" | "ga"), levels, sweeps, seed,
              ga{population, generations, mutation, decay, elite}
    calibrate phase_steps
    predict   checkpoint (null = run-dir default), quantize
    compare   reports (null = every focus_report_*.json in the run dir)
    evaluate  phase (null = run-dir default), label
    paths     run_dir
"""

from __future__ import annotations

import copy
import json
from pathlib import Path


class ConfigError(ValueError):
    """Bad or missing configuration; the message carries the key path."""


DEFAULT_CONFIG = {
    "tm": {"n_in": 64, "n_out": 256, "seed": 11},
    "dataset": {"pairs": 2000, "levels": 32, "split": 0.9, "seed": 12},
    "train": {
        "mode": "full",
        "epochs": 80,
        "batch": 32,
        "lr": 3e-4,
        "optimizer": "adam",
        "val_split": 0.1,
        "seed": 13,
        "weights": {"dev": 22.0, "dis": 0.03, "content": 0.03, "content_gen": 1e-6},
    },
    "target": {"kind": "point", "row": 7, "col": 9, "points": [[4, 4], [11, 12]]},
    "eval": {"baseline_draws": 200, "seed": 14},
    "optimize": {
        "method": "conj",
        "levels": 32,
        "sweeps": 1,
        "seed": 15,
        "ga": {
            "population": 30,
            "generations": 100,
            "mutation": 0.1,
            "decay": 0.995,
            "elite": 0.1,
        },
    },
    "calibrate": {"phase_steps": 4},
    "predict": {"checkpoint": None, "quantize": None},
    "compare": {"reports": None},
    "evaluate": {"phase": None, "label": "predicted"},
    "paths": {"run_dir": "run"},
}

# values at the paper's data scale; slow on a laptop, hence opt-in
PAPER_SCALE = {
    "tm": {"n_in": 1024, "n_out": 4096},
    "dataset": {"pairs": 12888},
}

# keys whose value may be null
_NULLABLE = {
    "dataset.levels",
    "predict.checkpoint",
    "predict.quantize",
    "compare.reports",
    "evaluate.phase",
}


def _merge(base: dict, patch: dict, path: str = ""):
    for key, value in patch.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, here)
        elif isinstance(base[key], dict):
            raise ConfigError(f"config key {here} must be a mapping")
        else:
            base[key] = value


def _check_types(node, default, path=""):
    for key, dval in default.items():
        here = f"{path}.{key}" if path else key
        val = node[key]
        if isinstance(dval, dict):
            _check_types(val, dval, here)
            continue
        if val is None:
            if here not in _NULLABLE:
                raise ConfigError(f"config key {here} must not be null")
            continue
        if isinstance(dval, bool) and not isinstance(val, bool):
            raise ConfigError(f"config key {here} must be a boolean")
        if isinstance(dval, (int, float)) and not isinstance(dval, bool):
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ConfigError(f"config key {here} must be a number")
        if isinstance(dval, str) and not isinstance(val, str):
            raise ConfigError(f"config key {here} must be a string")
        if isinstance(dval, list) and not isinstance(val, list):
            raise ConfigError(f"config key {here} must be a list")


def _check_seeds(cfg):
    for section in ("tm", "dataset", "train", "eval", "optimize"):
        seed = cfg[section]["seed"]
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"config key {section}.seed must be a nonnegative integer")


def parse_override(text: str):
    """Parse an override value: JSON first, bare string as fallback."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, dotted: str, value):
    parts = dotted.split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key: {'.'.join(parts[: i + 1])}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    node[parts[-1]] = value


def resolve(
    config_path: str | None,
    overrides: list[tuple[str, object]] = (),
    paper_scale: bool = False,
) -> dict:
    """Defaults <- file <- paper-scale preset <- dotted overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path is not None:
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                loaded = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        _merge(cfg, loaded)
    if paper_scale:
        _merge(cfg, copy.deepcopy(PAPER_SCALE))
    for dotted, value in overrides:
        apply_override(cfg, dotted, value)
    _check_types(cfg, DEFAULT_CONFIG)
    _check_seeds(cfg)
    return cfg


def write_resolved(cfg: dict, run_dir):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    out = run_dir / "config.resolved.json"
    with open(out, "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")
    return out
