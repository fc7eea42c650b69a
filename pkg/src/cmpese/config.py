"""Experiment configuration files (JSON).

Layout:

    {
      "network": { family, depth, widen_factor, num_classes, attention {...} },
      "train":   { preset?, epochs, batch_size, ... },
      "data":    { "kind": "synth" | "npz" | "cifar10" | "cifar100", ... },
      "out_dir": "runs/example"
    }

Unknown keys are rejected at every level. The environment variable
CMPESE_SEED, when set, overrides any configured seed.
"""

from __future__ import annotations

import json
import os

from .data import load_cifar_binary, load_dataset_npz, synth_dataset
from .errors import ConfigError
from .network import spec_from_dict
from .train import train_config_from_dict

_EXP_KEYS = {"network", "train", "data", "out_dir"}
_DATA_KEYS = {
    "synth": {"kind", "class_count", "n_per_class", "image_size", "seed"},
    "npz": {"kind", "path", "eval_path"},
    "cifar10": {"kind", "train", "test", "normalization"},
    "cifar100": {"kind", "train", "test", "normalization"},
}


def resolve_seed(seed):
    env = os.environ.get("CMPESE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"CMPESE_SEED must be an integer, got {env!r}") from None
    return seed


def load_experiment(path):
    with open(path) as f:
        raw = json.load(f)
    unknown = sorted(set(raw) - _EXP_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if "network" not in raw:
        raise ConfigError("config requires a 'network' section")
    spec = spec_from_dict(raw["network"])
    cfg = train_config_from_dict(raw.get("train", {}))
    cfg.seed = resolve_seed(cfg.seed)
    data = raw.get("data", {"kind": "synth", "class_count": spec.num_classes})
    validate_data_section(data)
    return {
        "spec": spec,
        "train": cfg,
        "data": data,
        "out_dir": raw.get("out_dir"),
    }


def validate_data_section(data):
    kind = data.get("kind")
    if kind not in _DATA_KEYS:
        raise ConfigError(
            f"unknown data kind {kind!r}; expected one of {', '.join(sorted(_DATA_KEYS))}")
    unknown = sorted(set(data) - _DATA_KEYS[kind])
    if unknown:
        raise ConfigError(f"unknown data keys for kind {kind!r}: {', '.join(unknown)}")


def materialize_data(data, num_classes):
    """Build (train_dataset, eval_dataset_or_None) from a data section."""
    kind = data["kind"]
    if kind == "synth":
        ds = synth_dataset(
            class_count=int(data.get("class_count", num_classes)),
            n_per_class=int(data.get("n_per_class", 100)),
            image_size=int(data.get("image_size", 16)),
            seed=resolve_seed(int(data.get("seed", 0))),
        )
        return ds, None
    if kind == "npz":
        train = load_dataset_npz(data["path"])
        eval_ds = load_dataset_npz(data["eval_path"]) if "eval_path" in data else None
        return train, eval_ds
    classes = 10 if kind == "cifar10" else 100
    norm = data.get("normalization", "meanstd")
    train, stats = load_cifar_binary(data["train"], classes=classes,
                                     normalization=norm, split="train")
    eval_ds = None
    if "test" in data:
        eval_ds, _ = load_cifar_binary(data["test"], classes=classes,
                                       normalization=norm, stats=stats, split="test")
    return train, eval_ds
