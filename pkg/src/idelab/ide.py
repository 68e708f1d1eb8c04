"""Induced distribution experiment: retrain from scratch on PGD images of a checkpoint."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import models
from .attack import AttackConfig
from .data import LabeledDataset, materialize_induced
from .seeding import derive_seed
from .training import Checkpoint, TrainConfig, eval_errors, standard_train

log = logging.getLogger(__name__)

INTERPOLATION_TARGET = 0.005


@dataclass
class IDEResult:
    t: int
    ide_train_error: float
    ide_test_error: float
    seed: int
    epochs_run: int
    final_train_loss: float
    interpolated: bool
    ide_train_loss: float = float("nan")
    ide_test_loss: float = float("nan")
    error: str | None = None
    model: models.Params | None = field(default=None, repr=False)
    induced_train: LabeledDataset | None = field(default=None, repr=False)
    induced_test: LabeledDataset | None = field(default=None, repr=False)

    @property
    def failed(self) -> bool:
        return self.error is not None


def run_ide(ckpt: Checkpoint, ds_train: LabeledDataset, ds_test: LabeledDataset, atk: AttackConfig,
            ide_cfg: TrainConfig, spec: models.ModelSpec | None = None, keep: bool = False,
            induce_seed: int = 0) -> IDEResult:
    """Induce S~_t and T~_t with ``ckpt.params``, train a fresh model on S~_t, test on T~_t.

    The retrained model only ever sees the checkpoint through the induced
    datasets; its initialisation comes from ``ide_cfg.seed``. Evaluation is
    clean (no attack) on the induced test set. ``spec`` defaults to the
    checkpoint's architecture. Training that misses the interpolation target
    (``ide_cfg.target_train_error``, default 0.5%) is flagged, not hidden.
    """
    spec = spec or ckpt.params.spec
    s_tilde = materialize_induced(ds_train, ckpt.params, atk, derive_seed(induce_seed, "induce-train", ckpt.t))
    t_tilde = materialize_induced(ds_test, ckpt.params, atk, derive_seed(induce_seed, "induce-test", ckpt.t))
    target = INTERPOLATION_TARGET if ide_cfg.target_train_error is None else ide_cfg.target_train_error
    cfg = replace(ide_cfg, target_train_error=target, schedule=())
    phi, history = standard_train(spec, s_tilde, cfg)
    tr = eval_errors(phi, s_tilde)
    te = eval_errors(phi, t_tilde)
    interpolated = tr.standard_error <= target
    if not interpolated:
        log.warning("IDE at t=%d stopped at train error %.4f above target %.4f",
                    ckpt.t, tr.standard_error, target)
    return IDEResult(
        t=ckpt.t, ide_train_error=tr.standard_error, ide_test_error=te.standard_error,
        seed=ide_cfg.seed, epochs_run=len(history),
        final_train_loss=history[-1]["loss"] if history else float("nan"),
        interpolated=interpolated, ide_train_loss=tr.mean_loss, ide_test_loss=te.mean_loss,
        model=phi if keep else None,
        induced_train=s_tilde if keep else None, induced_test=t_tilde if keep else None)


def ide_sweep(trajectory, ds_train: LabeledDataset, ds_test: LabeledDataset, atk: AttackConfig,
              ide_cfg: TrainConfig, spec: models.ModelSpec | None = None, keep: bool = False,
              induce_seed: int = 0) -> list[IDEResult]:
    """One :func:`run_ide` per checkpoint, ordered by ``t``.

    Every retrain starts from a fresh initialisation drawn from the same
    ``ide_cfg.seed``, so checkpoints differ only through their induced data.
    A failing checkpoint yields a result with ``error`` set; the sweep goes on.
    """
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    results = []
    for ck in sorted(trajectory, key=lambda c: c.t):
        try:
            results.append(run_ide(ck, ds_train, ds_test, atk, ide_cfg, spec, keep, induce_seed))
        except Exception as exc:  # recorded per checkpoint
            log.error("IDE failed at t=%d: %s", ck.t, exc)
            nan = float("nan")
            results.append(IDEResult(ck.t, nan, nan, ide_cfg.seed, 0, nan, False, error=str(exc)))
    return results


def aggregate(results_by_seed: list[list[IDEResult]]) -> dict[int, tuple[float, float]]:
    """Per-checkpoint (mean, std) of IDE test error across repeated runs."""
    by_t: dict[int, list[float]] = {}
    for results in results_by_seed:
        for r in results:
            if not r.failed:
                by_t.setdefault(r.t, []).append(r.ide_test_error)
    return {t: (float(np.mean(v)), float(np.std(v))) for t, v in sorted(by_t.items())}
