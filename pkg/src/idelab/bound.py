"""Generalisation bound on the induced distribution and its empirical counterpart."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import models
from .attack import AttackConfig, attack_batch
from .data import LabeledDataset


@dataclass(frozen=True)
class BoundInputs:
    """Constants of the bound.

    ``beta``: Lipschitz constant of the loss in its input (l2);
    ``B``: sup of the loss; ``d``: input dimension; ``m``: sample size;
    ``eld``: expected local dispersion; ``tau``: failure probability.
    """

    beta: float
    B: float
    d: int
    epsilon: float
    m: int
    eld: float
    tau: float = 0.05

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        for name in ("beta", "B", "d", "epsilon", "eld"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def bound_terms(inp: BoundInputs) -> tuple[float, float, float]:
    """The dispersion, radius and confidence terms, in that order."""
    rm = math.sqrt(inp.m)
    dispersion = 2 * inp.beta / rm * math.sqrt(inp.eld)
    radius = 2 * inp.beta * math.sqrt(inp.d) * inp.epsilon / rm
    confidence = 2 * inp.B / rm * (math.sqrt(math.log(1 / inp.tau) / 2) + 1)
    return dispersion, radius, confidence


def theorem_bound(inp: BoundInputs) -> float:
    """High-probability upper bound on ``|empirical - population|`` loss of any f
    trained on an m-sample of the induced distribution (natural log in the
    confidence term)."""
    return sum(bound_terms(inp))


def empirical_gg(phi_params: models.Params, induced_train: LabeledDataset,
                 induced_test: LabeledDataset) -> float:
    """``|mean loss on induced_train - mean loss on induced_test|`` under ``phi_params``."""
    if len(induced_train) == 0 or len(induced_test) == 0:
        raise ValueError("empty dataset")
    a = float(np.mean(models.per_example_loss(phi_params, induced_train.inputs, induced_train.labels)))
    b = float(np.mean(models.per_example_loss(phi_params, induced_test.inputs, induced_test.labels)))
    return abs(a - b)


def estimate_beta_B(params: models.Params | None, ds: LabeledDataset, atk: AttackConfig,
                    n_pairs: int = 16, seed: int = 0, loss_fn=None) -> tuple[float, float]:
    """Empirical ``(beta_hat, B_hat)``.

    ``B_hat`` is the largest loss seen at clean points, their PGD images and the
    sampled ball points. ``beta_hat`` is the largest ``|l(u) - l(u')| / ||u - u'||``
    over ``n_pairs`` random pairs in each example's eps-ball. Both are lower
    bounds on the true constants, never certificates.
    ``loss_fn(V, y) -> per-row losses`` overrides the model loss.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    if loss_fn is None:
        def loss_fn(V, y):
            return models.per_example_loss(params, V, y)
    rng = np.random.default_rng(seed)
    eps = atk.epsilon
    x, y = ds.inputs, ds.labels
    observed = [np.asarray(loss_fn(x, y), dtype=float)]
    if params is not None and eps > 0:
        observed.append(np.asarray(loss_fn(attack_batch(x, y, params, atk, rng), y), dtype=float))
    beta = 0.0
    if eps > 0:
        shape = (len(ds), n_pairs) + ds.input_shape
        u = np.clip(x[:, None] + rng.uniform(-eps, eps, size=shape), 0.0, 1.0)
        v = np.clip(x[:, None] + rng.uniform(-eps, eps, size=shape), 0.0, 1.0)
        yy = np.repeat(y, n_pairs)
        lu = np.asarray(loss_fn(u.reshape(-1, *ds.input_shape), yy), dtype=float)
        lv = np.asarray(loss_fn(v.reshape(-1, *ds.input_shape), yy), dtype=float)
        dist = np.linalg.norm((u - v).reshape(len(yy), -1), axis=1)
        ok = dist > 0
        if np.any(ok):
            beta = float(np.max(np.abs(lu - lv)[ok] / dist[ok]))
        observed += [lu, lv]
    B = float(max(np.max(o) for o in observed))
    return beta, B
