"""Experiment configuration: a JSON document, named presets, dotted overrides.

Schema (all sections required unless marked optional)::

    {
      "name": str,
      "dataset": {"kind": "blobs", "d", "num_classes", "n_train", "n_test",
                  "separation", "spread"}
               | {"kind": "idx", "train_images", "train_labels", "test_images",
                  "test_labels", "n_train", "n_test"},
      "model":   {"kind": "mlp", "hidden": [int, ...]}
               | {"kind": "small-cnn", "channels": [int, int]},
      "attack":  {"epsilon", "step_size", "steps", "init"},
      "train":   {"epochs", "batch_size", "lr", "weight_decay", "momentum",
                  "lr_milestones", "lr_decay", "schedule"},
      "ide":     {"epochs", "batch_size", "lr", "weight_decay", "momentum",
                  "target_train_error"},
      "metrics": {"n_pairs", "n_examples", "splits", "hist_checkpoints"},
      "bound":   {"mode": "estimate" | "given", "beta", "B", "tau",
                  "n_examples", "n_pairs"},
      "seeds":   [int, ...],
      "output_dir": str (optional; defaults to $IDELAB_OUTPUT_ROOT/<name>)
    }

The ``seed`` fields of the training configs are not part of the schema: every
stage derives its own stream from the per-run seed (see :mod:`idelab.seeding`).
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path

from ..attack import AttackConfig
from ..metrics import MCConfig
from ..models import ModelSpec
from ..training import TrainConfig

OUTPUT_ROOT_ENV = "IDELAB_OUTPUT_ROOT"
MNIST_DIR_ENV = "IDELAB_MNIST_DIR"


class ConfigError(ValueError):
    pass


def _mnist_paths() -> dict:
    root = Path(os.environ.get(MNIST_DIR_ENV, "data/mnist"))
    return {"train_images": str(root / "train-images-idx3-ubyte"),
            "train_labels": str(root / "train-labels-idx1-ubyte"),
            "test_images": str(root / "t10k-images-idx3-ubyte"),
            "test_labels": str(root / "t10k-labels-idx1-ubyte")}


_METRICS = {"n_pairs": 40, "n_examples": 40, "splits": ["test", "train"], "hist_checkpoints": 3}
_BOUND = {"mode": "estimate", "beta": None, "B": None, "tau": 0.05, "n_examples": 40, "n_pairs": 8}

PRESETS: dict[str, dict] = {
    # small training set + wide MLP: the robust train error keeps falling while
    # the robust test error stalls, so the robust gap grows along training
    "blobs-overfit": {
        "name": "blobs-overfit",
        "dataset": {"kind": "blobs", "d": 50, "num_classes": 2, "n_train": 200, "n_test": 1000,
                    "separation": 0.3, "spread": 0.15},
        "model": {"kind": "mlp", "hidden": [512, 512]},
        "attack": {"epsilon": 0.05, "step_size": 0.0125, "steps": 10, "init": "at-center"},
        "train": {"epochs": 150, "batch_size": 32, "lr": 0.03, "weight_decay": 0.0, "momentum": 0.9,
                  "lr_milestones": [], "lr_decay": 0.1,
                  "schedule": [18, 37, 56, 75, 93, 112, 131, 150]},
        "ide": {"epochs": 150, "batch_size": 32, "lr": 0.01, "weight_decay": 0.0, "momentum": 0.9,
                "target_train_error": 0.005},
        "metrics": dict(_METRICS),
        "bound": dict(_BOUND),
        "seeds": [0, 1, 2, 3, 4],
    },
    "blobs-easy": {
        "name": "blobs-easy",
        "dataset": {"kind": "blobs", "d": 10, "num_classes": 2, "n_train": 400, "n_test": 400,
                    "separation": 0.6, "spread": 0.1},
        "model": {"kind": "mlp", "hidden": [32]},
        "attack": {"epsilon": 0.05, "step_size": 0.02, "steps": 5, "init": "at-center"},
        "train": {"epochs": 10, "batch_size": 32, "lr": 0.05, "weight_decay": 0.0, "momentum": 0.0,
                  "lr_milestones": [], "lr_decay": 0.1, "schedule": [2, 6, 10]},
        "ide": {"epochs": 40, "batch_size": 32, "lr": 0.05, "weight_decay": 0.0, "momentum": 0.0,
                "target_train_error": 0.005},
        "metrics": {"n_pairs": 50, "n_examples": 50, "splits": ["test", "train"], "hist_checkpoints": 3},
        "bound": dict(_BOUND),
        "seeds": [0],
    },
    # subsampled MNIST, small CNN, the MNIST attack constants (eps 0.3, step 0.01, 40 steps)
    "mnist-small": {
        "name": "mnist-small",
        "dataset": {"kind": "idx", **_mnist_paths(), "n_train": 1000, "n_test": 500},
        "model": {"kind": "small-cnn", "channels": [8, 16]},
        "attack": {"epsilon": 0.3, "step_size": 0.01, "steps": 40, "init": "at-center"},
        "train": {"epochs": 10, "batch_size": 128, "lr": 0.05, "weight_decay": 0.0, "momentum": 0.9,
                  "lr_milestones": [], "lr_decay": 0.1, "schedule": [2, 4, 6, 8, 10]},
        "ide": {"epochs": 30, "batch_size": 128, "lr": 0.05, "weight_decay": 0.0, "momentum": 0.9,
                "target_train_error": 0.005},
        "metrics": {"n_pairs": 20, "n_examples": 20, "splits": ["test"], "hist_checkpoints": 3},
        "bound": dict(_BOUND),
        "seeds": [0],
    },
    # the full MNIST attack and batch size on a larger subsample
    "mnist-full-attack": {
        "name": "mnist-full-attack",
        "dataset": {"kind": "idx", **_mnist_paths(), "n_train": 10000, "n_test": 2000},
        "model": {"kind": "small-cnn", "channels": [16, 32]},
        "attack": {"epsilon": 0.3, "step_size": 0.01, "steps": 40, "init": "at-center"},
        "train": {"epochs": 30, "batch_size": 128, "lr": 0.05, "weight_decay": 0.0, "momentum": 0.9,
                  "lr_milestones": [20], "lr_decay": 0.1, "schedule": [5, 10, 15, 20, 25, 30]},
        "ide": {"epochs": 50, "batch_size": 128, "lr": 0.05, "weight_decay": 0.0, "momentum": 0.9,
                "target_train_error": 0.005},
        "metrics": {"n_pairs": 50, "n_examples": 100, "splits": ["test", "train"], "hist_checkpoints": 3},
        "bound": dict(_BOUND),
        "seeds": [0],
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict

    # -- typed views -------------------------------------------------------
    @property
    def name(self) -> str:
        return self.raw["name"]

    @property
    def seeds(self) -> list[int]:
        return [int(s) for s in self.raw["seeds"]]

    @property
    def dataset(self) -> dict:
        return self.raw["dataset"]

    @property
    def attack(self) -> AttackConfig:
        return AttackConfig(**self.raw["attack"])

    def model_spec(self, input_shape: tuple[int, ...], num_classes: int) -> ModelSpec:
        m = self.raw["model"]
        if m["kind"] == "mlp":
            d = 1
            for s in input_shape:
                d *= s
            return ModelSpec.mlp([d, *m["hidden"], num_classes], input_shape=input_shape)
        return ModelSpec.small_cnn(input_shape, num_classes, m["channels"])

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.raw["train"])

    def ide_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.raw["ide"])

    def mc_config(self, seed: int) -> MCConfig:
        return MCConfig(int(self.raw["metrics"]["n_pairs"]), seed)

    @property
    def metrics(self) -> dict:
        return self.raw["metrics"]

    @property
    def bound(self) -> dict:
        return self.raw["bound"]

    @property
    def output_dir(self) -> Path:
        if self.raw.get("output_dir"):
            return Path(self.raw["output_dir"])
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / self.name

    # -- checks ------------------------------------------------------------
    def validate(self, check_files: bool = True) -> "ExperimentConfig":
        r = self.raw
        for key in ("name", "dataset", "model", "attack", "train", "ide", "metrics", "bound", "seeds"):
            if key not in r:
                raise ConfigError(f"missing section {key!r}")
        if not r["seeds"]:
            raise ConfigError("seed list is empty")
        if not r["train"].get("schedule"):
            raise ConfigError("checkpoint schedule is empty")
        try:
            self.attack
            self.train_config(0)
            self.ide_config(0)
            self.mc_config(0)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        kind = r["dataset"].get("kind")
        if kind == "idx":
            if check_files:
                for key in ("train_images", "train_labels", "test_images", "test_labels"):
                    if not Path(r["dataset"][key]).is_file():
                        raise ConfigError(f"dataset file {r['dataset'][key]} does not exist")
        elif kind != "blobs":
            raise ConfigError(f"unknown dataset kind {kind!r}")
        if r["model"].get("kind") not in ("mlp", "small-cnn"):
            raise ConfigError(f"unknown model kind {r['model'].get('kind')!r}")
        if r["bound"].get("mode") not in ("estimate", "given"):
            raise ConfigError("bound.mode must be 'estimate' or 'given'")
        if r["bound"]["mode"] == "given" and (r["bound"].get("beta") is None or r["bound"].get("B") is None):
            raise ConfigError("bound.mode 'given' needs beta and B")
        if not set(r["metrics"].get("splits", [])) <= {"train", "test"} or not r["metrics"].get("splits"):
            raise ConfigError("metrics.splits must be a non-empty subset of ['test', 'train']")
        return self

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ExperimentConfig(copy.deepcopy(PRESETS[name]))


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig(raw)


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """``["train.epochs=5", "seeds=[1,2]"]`` -> new config. Values parse as JSON,
    falling back to a bare string."""
    raw = copy.deepcopy(cfg.raw)
    for item in overrides or ():
        key, sep, text = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        *path, last = key.split(".")
        for part in path:
            node = node.setdefault(part, {})
        node[last] = value
    return ExperimentConfig(raw)
