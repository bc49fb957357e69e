"""Run configuration: one JSON file merging per-module settings.

The file is deep-merged over the defaults below, schema-validated before any
work happens (unknown keys are rejected), and the fully-resolved result is
written next to every run's outputs so any run can be reproduced from its
own directory.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from .errors import ConfigError

DEFAULTS: dict = {
    "paths": {
        "manifest": "manifest.jsonl",
        "store": "store.tsv",
        "vocab": "vocab.tsv",
        "classes": "classes.json",
        "descriptors": "descriptors.jsonl",
    },
    "knowledge": {
        "model": "davinci-003",
        "endpoint": None,
        "max_tokens": 100,
        "temperature": 0.7,
        "max_attempts": 3,
        "backoff_seconds": 0.5,
        "response_path": ["choices", 0, "text"],
        "include_general": True,
    },
    "geography": {
        "source": [],            # empty: inferred from manifest splits
        "target": [],
        "knowledge_source": "target",
    },
    "train": {
        "shots": 16,
        "epochs": 100,
        "batch_size": 128,
        "context_length": 4,
        "reg_weight": 4.0,
        "tau": 0.01,
        "learning_rate": 0.002,
        "momentum": 0.9,
        "schedule": "cosine",
        "init_std": 0.02,
        "seed": 0,
        "mode": "country_in_prompt_llm",
    },
    "zeroshot": {
        "strategies": ["default", "country_llm"],
        "tau_zs": 1.0,
        "split": "target",
        "fallback": ["country", "continent"],
    },
    "eval": {
        "ks": [1, 3],
        "groups": ["continent", "country", "income_bucket"],
        "thresholds": [40, 60, 80, 100],
    },
    "synth": {
        "n_classes": 5,
        "n_geographies": 4,
        "n_source_geographies": 1,
        "samples_per_class_geo": 40,
        "sigma": 0.3,
        "delta_source": 0.0,
        "delta_target": 2.0,
        "deltas": None,
        "dim": 32,
        "descriptors_per_pair": 3,
        "confusion_mix": 0.6,
        "descriptor_emphasis": 0.9,
        "descriptor_gain": 2.5,
        "shots": 16,
        "seed": 0,
    },
    "fewshot": {
        "shots_list": [1, 2, 4, 8, 12, 16],
        "test_fraction": 0.5,
        "seed": 0,
    },
    "analyze": {
        "stats": "stats.csv",
        "keywords": "keywords.json",
        "strategies": ["country_in_prompt", "country_llm", "country_in_prompt_llm"],
        "alpha": 0.01,
    },
    "plot": True,
}

_STRATEGIES = ["default", "general_llm", "country_in_prompt", "country_llm",
               "country_in_prompt_llm"]
_TRAIN_MODES = ["none", "kgcoop"] + _STRATEGIES[2:]


def _obj(properties: dict, **extra) -> dict:
    return {"type": "object", "properties": properties,
            "additionalProperties": False, **extra}


SCHEMA = _obj({
    "paths": _obj({k: {"type": "string"} for k in DEFAULTS["paths"]}),
    "knowledge": _obj({
        "model": {"type": "string"},
        "endpoint": {"type": ["string", "null"]},
        "max_tokens": {"type": "integer", "minimum": 1},
        "temperature": {"type": "number", "minimum": 0},
        "max_attempts": {"type": "integer", "minimum": 1},
        "backoff_seconds": {"type": "number", "minimum": 0},
        "response_path": {"type": "array",
                          "items": {"type": ["string", "integer"]}},
        "include_general": {"type": "boolean"},
    }),
    "geography": _obj({
        "source": {"type": "array", "items": {"type": "string"}},
        "target": {"type": "array", "items": {"type": "string"}},
        "knowledge_source": {"enum": ["target", "all", "source"]},
    }),
    "train": _obj({
        "shots": {"type": "integer", "minimum": 1},
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "context_length": {"type": "integer", "minimum": 1},
        "reg_weight": {"type": "number", "minimum": 0},
        "tau": {"type": "number", "exclusiveMinimum": 0},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0},
        "schedule": {"enum": ["cosine", "constant"]},
        "init_std": {"type": "number", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "mode": {"enum": _TRAIN_MODES},
    }),
    "zeroshot": _obj({
        "strategies": {"type": "array", "items": {"enum": _STRATEGIES}},
        "tau_zs": {"type": "number", "exclusiveMinimum": 0},
        "split": {"enum": ["all", "target", "source-train", "source-val",
                           "source-test"]},
        "fallback": {"type": "array", "items": {"enum": ["country", "continent"]}},
    }),
    "eval": _obj({
        "ks": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "groups": {"type": "array",
                   "items": {"enum": ["continent", "country", "income_bucket"]}},
        "thresholds": {"type": "array", "items": {"type": "number"}},
    }),
    "synth": _obj({
        "n_classes": {"type": "integer", "minimum": 2},
        "n_geographies": {"type": "integer", "minimum": 2},
        "n_source_geographies": {"type": "integer", "minimum": 1},
        "samples_per_class_geo": {"type": "integer", "minimum": 1},
        "sigma": {"type": "number", "minimum": 0},
        "delta_source": {"type": "number", "minimum": 0},
        "delta_target": {"type": "number", "minimum": 0},
        "deltas": {"type": ["array", "null"],
                   "items": {"type": "number", "minimum": 0}},
        "dim": {"type": "integer", "minimum": 2},
        "descriptors_per_pair": {"type": "integer", "minimum": 1},
        "confusion_mix": {"type": "number", "minimum": 0, "maximum": 1},
        "descriptor_emphasis": {"type": "number", "minimum": 0, "maximum": 1},
        "descriptor_gain": {"type": "number", "minimum": 0},
        "shots": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
    }),
    "fewshot": _obj({
        "shots_list": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "test_fraction": {"type": "number", "exclusiveMinimum": 0,
                          "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0},
    }),
    "analyze": _obj({
        "stats": {"type": "string"},
        "keywords": {"type": "string"},
        "strategies": {"type": "array", "items": {"enum": _STRATEGIES}},
        "alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
    }),
    "plot": {"type": "boolean"},
})


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_run_config(path=None, overrides: dict | None = None) -> dict:
    """Merge defaults <- config file <- CLI overrides, then validate."""
    merged = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        merged = _deep_merge(merged, file_cfg)
    if overrides:
        merged = _deep_merge(merged, overrides)
    try:
        jsonschema.validate(merged, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}")
    return merged


def write_resolved_config(config: dict, out_dir, command: str) -> Path:
    out = Path(out_dir) / f"{command}_resolved_config.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out
