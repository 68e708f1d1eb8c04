"""Minibatch SGD: standard training, PGD adversarial training, error evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import models
from .attack import AttackConfig, attack_batch
from .data import LabeledDataset
from .seeding import derive_seed

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, message: str = ""):
        super().__init__(f"non-finite loss at epoch {epoch}{': ' + message if message else ''}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float
    seed: int
    weight_decay: float = 0.0
    schedule: tuple[int, ...] = ()
    target_train_error: float | None = None
    momentum: float = 0.0
    lr_milestones: tuple[int, ...] = ()
    lr_decay: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(int(s) for s in self.lr_milestones))
        object.__setattr__(self, "schedule", tuple(int(s) for s in self.schedule))
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        s = self.schedule
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError("checkpoint schedule must be strictly increasing")
        if s and (s[0] < 0 or s[-1] > self.epochs):
            raise ValueError(f"schedule {s} outside [0, {self.epochs}]")

    def lr_at(self, epoch: int) -> float:
        """Piecewise-constant rate: multiplied by ``lr_decay`` at each milestone passed."""
        return self.lr * self.lr_decay ** sum(epoch > m for m in self.lr_milestones)

    @property
    def resolved_schedule(self) -> tuple[int, ...]:
        """The schedule, defaulting to every epoch."""
        return self.schedule or tuple(range(1, self.epochs + 1))

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr, "seed": self.seed,
                "weight_decay": self.weight_decay, "schedule": list(self.schedule),
                "target_train_error": self.target_train_error, "momentum": self.momentum,
                "lr_milestones": list(self.lr_milestones), "lr_decay": self.lr_decay}


@dataclass(frozen=True)
class Checkpoint:
    t: int
    params: models.Params
    metrics: dict = field(default_factory=dict)


@dataclass
class Trajectory:
    checkpoints: list[Checkpoint]
    history: list[dict]

    def __iter__(self) -> Iterator[Checkpoint]:
        return iter(self.checkpoints)

    def __len__(self) -> int:
        return len(self.checkpoints)

    def __getitem__(self, i) -> Checkpoint:
        return self.checkpoints[i]

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]


@dataclass(frozen=True)
class ErrorReport:
    standard_error: float
    mean_loss: float
    robust_error: float | None = None
    mean_robust_loss: float | None = None


def _sgd_loop(spec: models.ModelSpec, ds: LabeledDataset, cfg: TrainConfig,
              atk: AttackConfig | None,
              on_checkpoint: Callable[[Checkpoint], None] | None = None):
    if ds.input_shape != spec.input_shape:
        raise ValueError(f"dataset input shape {ds.input_shape} != model {spec.input_shape}")
    params = models.init(spec, derive_seed(cfg.seed, "init"))
    order_rng = np.random.default_rng(derive_seed(cfg.seed, "order"))
    attack_rng = np.random.default_rng(derive_seed(cfg.seed, "attack-init"))
    schedule = set(cfg.resolved_schedule)
    history: list[dict] = []
    checkpoints: list[Checkpoint] = []

    def save(t, row):
        ck = Checkpoint(t, params, dict(row))
        checkpoints.append(ck)
        if on_checkpoint is not None:
            on_checkpoint(ck)

    if 0 in schedule:
        save(0, {"epoch": 0})
    n = len(ds)
    tensors = params.tensors
    velocity = {k: np.zeros_like(v) for k, v in tensors.items()} if cfg.momentum else None
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        perm = order_rng.permutation(n)
        tot_loss = 0.0
        wrong = 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            xb, yb = ds.inputs[idx], ds.labels[idx]
            if atk is not None:
                xb = attack_batch(xb, yb, params, atk, attack_rng)
            value, _, logits, graph = models.forward(params, xb, yb)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch)
            grads = graph.backward(list(tensors))
            tot_loss += value * len(idx)
            wrong += int(np.count_nonzero(np.argmax(logits, axis=1) != yb))
            if cfg.weight_decay:
                grads = {k: grads[k] + cfg.weight_decay * v for k, v in tensors.items()}
            if velocity is not None:
                velocity = {k: cfg.momentum * velocity[k] + grads[k] for k in tensors}
                grads = velocity
            tensors = {k: v - lr * grads[k] for k, v in tensors.items()}
            if not all(np.all(np.isfinite(v)) for v in tensors.values()):
                raise TrainingDiverged(epoch, "parameters became non-finite")
            params = models.Params(spec, tensors)
        row = {"epoch": epoch, "loss": tot_loss / n, "error": wrong / n}
        if cfg.target_train_error is not None:
            row["train_error"] = eval_errors(params, ds).standard_error
        history.append(row)
        if epoch in schedule:
            save(epoch, row)
        if cfg.target_train_error is not None and row["train_error"] <= cfg.target_train_error:
            break
    return params, history, checkpoints


def standard_train(spec: models.ModelSpec, ds_train: LabeledDataset, cfg: TrainConfig):
    """Plain minibatch SGD on cross-entropy; returns ``(params, history)``.

    With ``cfg.target_train_error`` set, training stops at the first epoch whose
    clean training error reaches the target (``epochs`` is then a cap).
    """
    params, history, _ = _sgd_loop(spec, ds_train, cfg, None)
    return params, history


def pgd_at_train(spec: models.ModelSpec, ds_train: LabeledDataset, cfg: TrainConfig,
                 atk: AttackConfig, on_checkpoint: Callable[[Checkpoint], None] | None = None) -> Trajectory:
    """PGD adversarial training; every minibatch is replaced by its PGD images
    under the current parameters before the SGD step."""
    _, history, checkpoints = _sgd_loop(spec, ds_train, cfg, atk, on_checkpoint)
    return Trajectory(checkpoints, history)


def eval_errors(params: models.Params, ds: LabeledDataset, atk: AttackConfig | None = None,
                rng: np.random.Generator | None = None, batch_size: int = 1024) -> ErrorReport:
    n = len(ds)
    if n == 0:
        raise ValueError("empty dataset")
    wrong = rwrong = 0
    tot = rtot = 0.0
    for lo in range(0, n, batch_size):
        xb, yb = ds.inputs[lo:lo + batch_size], ds.labels[lo:lo + batch_size]
        _, losses, logits, _ = models.forward(params, xb, yb)
        wrong += int(np.count_nonzero(np.argmax(logits, axis=1) != yb))
        tot += float(losses.sum())
        if atk is not None:
            adv = attack_batch(xb, yb, params, atk, rng)
            _, losses, logits, _ = models.forward(params, adv, yb)
            rwrong += int(np.count_nonzero(np.argmax(logits, axis=1) != yb))
            rtot += float(losses.sum())
    if atk is None:
        return ErrorReport(wrong / n, tot / n)
    return ErrorReport(wrong / n, tot / n, rwrong / n, rtot / n)


def robust_gap(trajectory, ds_train: LabeledDataset, ds_test: LabeledDataset,
               atk: AttackConfig) -> list[float]:
    """``|robust test error - robust train error|`` per checkpoint."""
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    gaps = []
    for ck in trajectory:
        tr = eval_errors(ck.params, ds_train, atk, np.random.default_rng(derive_seed(0, "gap-train", ck.t)))
        te = eval_errors(ck.params, ds_test, atk, np.random.default_rng(derive_seed(0, "gap-test", ck.t)))
        gaps.append(abs(te.robust_error - tr.robust_error))
    return gaps
