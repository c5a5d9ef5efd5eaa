"""Experiment configuration: strict-schema JSON with value provenance.

Unknown keys are rejected (with a nearest-key hint), types are checked
against the schema defaults, and every resolved value remembers whether it
came from the default, the file, or a command-line flag — the CLI run-log
header records that provenance.
"""

from __future__ import annotations

import difflib
import json
from dataclasses import dataclass, field

SCHEMA: dict[str, dict[str, object]] = {
    "ontology": {"n_first": 24, "children_per_first": 9, "seed": 0},
    "cohort": {
        "n_diseases": 60,
        "size": 10000,
        "history_dim": 16,
        "seed": 0,
        "shared_category_rates": False,
        "category_presence": [0.2, 0.45],
        "n_signature_children": 6,
        "n_signature_categories": 3,
        "signature_first_prob": [0.35, 0.65],
        "background_first_prob": [0.04, 0.12],
        "signature_child_prob": [0.55, 0.85],
        "background_child_prob": [0.005, 0.03],
        "denial_prob": 0.1,
        "history_scale": 0.3,
        "history_noise": 1.0,
    },
    "split": {"fractions": [0.7, 0.1, 0.2], "seed": 0},
    "env": {"budget": 10, "reward_variant": "P", "pn_denial_reward": 0.2},
    "ppo": {
        "gamma": 0.99,
        "gae_lambda": 0.95,
        "clip_eps": 0.2,
        "epochs_per_update": 4,
        "minibatch_size": 256,
        "learning_rate": 3e-4,
        "entropy_coef": 0.01,
        "value_coef": 0.5,
        "n_envs": 8,
        "rollout_steps": 2048,
        "total_steps": 120000,
        "seed": 0,
        "trunk_hidden": [256, 256],
        "head_hidden": [128],
    },
    "screener": {
        "hidden": [128],
        "learning_rate": 1e-3,
        "batch_size": 128,
        "max_epochs": 80,
        "patience": 10,
        "seed": 0,
        "variant": "policy_rollout",
    },
    "channel": {"kind": "exact", "p_neg_to_pos": 0.1, "p_pos_to_neg": 0.1, "seed": 0},
    "consultation": {"k_candidates": 1},
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)  # "section.key" -> source

    def get(self, dotted: str):
        section, key = dotted.split(".", 1)
        return self.values[section][key]

    def section(self, name: str) -> dict:
        return self.values[name]

    def set_flag(self, dotted: str, value) -> None:
        section, key = dotted.split(".", 1)
        _check_known(section, key)
        _check_type(section, key, value)
        self.values[section][key] = value
        self.provenance[dotted] = "flag"

    def as_dict(self) -> dict:
        return {"values": self.values, "provenance": self.provenance}


def _nearest(word: str, candidates) -> str:
    match = difflib.get_close_matches(word, list(candidates), n=1)
    return f" (did you mean {match[0]!r}?)" if match else ""


def _check_known(section: str, key: str | None = None) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section {section!r}{_nearest(section, SCHEMA)}")
    if key is not None and key not in SCHEMA[section]:
        raise ConfigError(
            f"unknown key {key!r} in section {section!r}"
            f"{_nearest(key, SCHEMA[section])}"
        )


def _check_type(section: str, key: str, value) -> None:
    default = SCHEMA[section][key]
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, list):
        elem = default[0]
        ok = isinstance(value, list) and all(
            isinstance(v, (int, float)) if isinstance(elem, (int, float)) else isinstance(v, type(elem))
            for v in value
        )
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(
            f"{section}.{key}: expected {type(default).__name__}, "
            f"got {type(value).__name__} ({value!r})"
        )


def default_config() -> ExperimentConfig:
    config = ExperimentConfig()
    for section, keys in SCHEMA.items():
        config.values[section] = {}
        for key, default in keys.items():
            config.values[section][key] = json.loads(json.dumps(default))
            config.provenance[f"{section}.{key}"] = "default"
    return config


def load_config(path) -> ExperimentConfig:
    """Read a JSON config file over the defaults; empty files mean defaults."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read().strip()
    if not text:
        doc = {}
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    config = default_config()
    for section, body in doc.items():
        _check_known(section)
        if not isinstance(body, dict):
            raise ConfigError(f"{path}: section {section!r} must be an object")
        for key, value in body.items():
            _check_known(section, key)
            _check_type(section, key, value)
            config.values[section][key] = value
            config.provenance[f"{section}.{key}"] = "file"
    return config
