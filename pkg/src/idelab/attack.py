"""l-infinity PGD: projection, one-step map, k-step map, and a grid oracle."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import models

AT_CENTER = "at-center"
UNIFORM_RANDOM = "uniform-random"


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    step_size: float
    steps: int
    init: str = AT_CENTER

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.steps > 0 and self.step_size <= 0:
            raise ValueError("step_size must be positive when steps > 0")
        if self.init not in (AT_CENTER, UNIFORM_RANDOM):
            raise ValueError(f"unknown init {self.init!r}")

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "step_size": self.step_size, "steps": self.steps, "init": self.init}


def project_linf(v, x, epsilon: float) -> np.ndarray:
    """Clamp ``v`` into the box ``[x - eps, x + eps]`` and then into ``[0, 1]``."""
    v = np.asarray(v, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if v.shape != x.shape:
        raise ValueError(f"shape mismatch {v.shape} vs {x.shape}")
    return np.clip(np.clip(v, x - epsilon, x + epsilon), 0.0, 1.0)


def input_grad(params: models.Params, v, y) -> np.ndarray:
    """Per-example input gradients of the loss, stacked like ``v``."""
    _, grads = models.loss_and_grads(params, v, y, wrt=["x"], reduction="sum")
    g = grads["x"]
    if not np.all(np.isfinite(g)):
        bad = int(np.count_nonzero(~np.isfinite(g)))
        raise AttackError(f"non-finite input gradient ({bad} entries); check params and inputs")
    return g.reshape(np.shape(v))


def pgd_step(x_cur, x, y, params: models.Params, cfg: AttackConfig) -> np.ndarray:
    """``Pi_B(x, eps)[x_cur + step_size * sign(grad)]`` with ``sign(0) = 0``."""
    x_cur = np.asarray(x_cur, dtype=np.float64)
    g = input_grad(params, x_cur, y)
    return project_linf(x_cur + cfg.step_size * np.sign(g), x, cfg.epsilon)


def pgd_k(x0, x, y, params: models.Params, cfg: AttackConfig) -> np.ndarray:
    """k-fold composition of :func:`pgd_step` from ``x0`` (projected first).

    Works on a single example or a batch with a leading axis; in a batch each
    example is attacked independently around its own anchor.
    """
    v = project_linf(x0, x, cfg.epsilon)
    if cfg.epsilon == 0:
        return v
    for _ in range(cfg.steps):
        v = pgd_step(v, x, y, params, cfg)
    return v


def initial_point(x, cfg: AttackConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if cfg.init == AT_CENTER:
        return x.copy()
    if rng is None:
        raise AttackError("uniform-random init needs an explicit random generator")
    return np.clip(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), 0.0, 1.0)


def attack_batch(x, y, params: models.Params, cfg: AttackConfig,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """``Q(x0)`` for a batch, where ``x0`` follows ``cfg.init``."""
    return pgd_k(initial_point(x, cfg, rng), x, y, params, cfg)


def brute_force_inner_max(x, y, params: models.Params | None, epsilon: float, grid_n: int,
                          loss_fn=None, cap: float = 1e7, chunk: int = 1 << 15):
    """Exhaustive maximisation of the loss over a grid of ``B(x, eps) & [0,1]^d``.

    Each coordinate takes ``grid_n`` evenly spaced values between its clipped
    bounds (endpoints included). ``loss_fn(V) -> per-row losses`` overrides the
    model loss. Returns ``(v_star, loss_star)``; ties keep the first grid point.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    if grid_n < 1:
        raise ValueError("grid_n must be positive")
    if float(grid_n) ** d > cap:
        raise AttackError(f"grid of {grid_n}^{d} points exceeds cap {cap:g}")
    flat = x.reshape(-1)
    lo = np.maximum(flat - epsilon, 0.0)
    hi = np.minimum(flat + epsilon, 1.0)
    axes = [np.linspace(a, b, grid_n) if grid_n > 1 else np.array([c]) for a, b, c in zip(lo, hi, flat)]
    if loss_fn is None:
        def loss_fn(V):
            return models.per_example_loss(params, V.reshape(len(V), *x.shape), np.full(len(V), y))

    best_v, best_l = None, -np.inf
    it = itertools.product(*axes)
    while True:
        block = np.array(list(itertools.islice(it, chunk)))
        if block.size == 0:
            break
        losses = np.asarray(loss_fn(block), dtype=np.float64)
        i = int(np.argmax(losses))
        if losses[i] > best_l:
            best_l, best_v = float(losses[i]), block[i]
    return best_v.reshape(x.shape), best_l
