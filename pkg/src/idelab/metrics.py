"""Monte-Carlo statistics of the PGD operator around each anchor point.

For an anchor ``(x, y)`` and checkpoint parameters, draw start points
``x + rho`` with ``rho`` uniform on the l-infinity ball of radius eps (clipped
to [0, 1]) and push them through ``Q``, the k-step PGD map centred at ``x``.
From the outputs ``Z = Q(x + rho)``, ``Z' = Q(x + rho')``:

* local dispersion: mean of ``||Z - Z'||_2^2`` over independent pairs;
* clean distance:   mean of ``||Z - x||_2``;
* angular spread:   mean angle between ``Z`` and ``Z'`` in radians.

An ``operator`` argument (a callable mapping a stack of start points to a
stack of outputs) replaces ``Q``; tests use it for identity/constant stubs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import models
from .attack import AttackConfig, pgd_k
from .data import LabeledDataset
from .seeding import derive_seed

ZERO_NORM = 1e-12

Operator = Callable[[np.ndarray], np.ndarray]


class MetricError(RuntimeError):
    pass


@dataclass(frozen=True)
class MCConfig:
    n_pairs: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")


@dataclass(frozen=True)
class Estimate:
    """Sample mean with its standard error; ``skipped`` counts discarded draws."""

    value: float
    std_error: float
    n: int
    skipped: int = 0

    def __float__(self) -> float:
        return self.value


DispersionEstimate = Estimate


@dataclass
class MetricsReport:
    t: int
    eld: float
    eld_se: float
    mean_d: float
    mean_phi: float
    split: str = ""
    values: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    histograms: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)
    failures: int = 0


def _estimate(samples: np.ndarray, skipped: int = 0) -> Estimate:
    n = len(samples)
    se = float(np.std(samples, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return Estimate(float(np.mean(samples)), se, n, skipped)


def pgd_operator(x, y, params: models.Params, atk: AttackConfig) -> Operator:
    """``Q_{x,y,theta}`` as a batched callable over start points."""
    x = np.asarray(x, dtype=np.float64)

    def op(starts: np.ndarray) -> np.ndarray:
        anchors = np.broadcast_to(x, starts.shape)
        return pgd_k(starts, anchors, np.full(len(starts), y), params, atk)

    return op


def draw_starts(x, epsilon: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points ``clip(x + rho, 0, 1)`` with ``rho ~ U[-eps, eps]^d``."""
    x = np.asarray(x, dtype=np.float64)
    rho = rng.uniform(-epsilon, epsilon, size=(n,) + x.shape)
    return np.clip(x + rho, 0.0, 1.0)


def sample_pairs(x, y, params, atk: AttackConfig, mc: MCConfig, operator: Operator | None = None):
    """Outputs ``(Z, Z')`` for ``mc.n_pairs`` independent start pairs, flattened to (n, d)."""
    rng = np.random.default_rng(mc.seed)
    starts = draw_starts(x, atk.epsilon, 2 * mc.n_pairs, rng)
    op = operator or pgd_operator(x, y, params, atk)
    out = np.asarray(op(starts), dtype=np.float64).reshape(2 * mc.n_pairs, -1)
    return out[:mc.n_pairs], out[mc.n_pairs:]


def _pair_stats(x_flat: np.ndarray, z: np.ndarray, zp: np.ndarray):
    sq = np.sum((z - zp) ** 2, axis=1)
    dist = np.sqrt(np.sum((z - x_flat) ** 2, axis=1))
    nz, nzp = np.linalg.norm(z, axis=1), np.linalg.norm(zp, axis=1)
    ok = (nz >= ZERO_NORM) & (nzp >= ZERO_NORM)
    cos = np.einsum("ij,ij->i", z[ok], zp[ok]) / (nz[ok] * nzp[ok])
    angles = np.arccos(np.clip(cos, -1.0, 1.0))
    return sq, dist, angles, int(np.count_nonzero(~ok))


def local_dispersion(x, y, params, atk: AttackConfig, mc: MCConfig,
                     operator: Operator | None = None) -> Estimate:
    z, zp = sample_pairs(x, y, params, atk, mc, operator)
    return _estimate(np.sum((z - zp) ** 2, axis=1))


def mean_distance_to_clean(x, y, params, atk: AttackConfig, mc: MCConfig,
                           operator: Operator | None = None) -> Estimate:
    """Mean of ``||Q(x + rho) - x||_2`` over ``mc.n_pairs`` single draws."""
    z, _ = sample_pairs(x, y, params, atk, mc, operator)
    return _estimate(np.linalg.norm(z - np.ravel(x), axis=1))


def angular_spread(x, y, params, atk: AttackConfig, mc: MCConfig,
                   operator: Operator | None = None) -> Estimate:
    """Mean angle between ``Z`` and ``Z'``; pairs with a (near-)zero vector are skipped."""
    z, zp = sample_pairs(x, y, params, atk, mc, operator)
    _, _, angles, skipped = _pair_stats(np.ravel(x), z, zp)
    if len(angles) == 0:
        raise MetricError(f"all {skipped} pairs had a zero-norm output; angle undefined")
    return _estimate(angles, skipped)


def trace_cov_identity_check(samples) -> tuple[float, float]:
    """Pairwise mean of ``||a - b||^2`` over unordered distinct pairs, and
    twice the trace of the unbiased sample covariance of the same samples."""
    s = np.asarray(samples, dtype=np.float64)
    s = s.reshape(len(s), -1)
    n = len(s)
    if n < 2:
        raise MetricError("need at least two samples")
    iu = np.triu_indices(n, k=1)
    diffs = s[:, None, :] - s[None, :, :]
    pairwise = float(np.mean(np.sum(diffs ** 2, axis=2)[iu]))
    centered = s - s.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    return pairwise, float(2.0 * np.trace(cov))


@dataclass(frozen=True)
class TriangleCheck:
    lhs: float
    rhs: float
    std_error: float
    holds: bool


def triangle_check(x, y, params, atk: AttackConfig, mc: MCConfig,
                   operator: Operator | None = None) -> TriangleCheck:
    """``E||Q(x+rho) - Q(x+rho')||`` against ``2 d_t`` from the same draws.

    The right side averages ``||Z - x||`` over all 2n outputs; the inequality is
    accepted when ``lhs <= rhs + 3 * sqrt(se_lhs^2 + se_rhs^2)``.
    """
    z, zp = sample_pairs(x, y, params, atk, mc, operator)
    xf = np.ravel(x)
    lhs = _estimate(np.linalg.norm(z - zp, axis=1))
    per_pair = np.linalg.norm(z - xf, axis=1) + np.linalg.norm(zp - xf, axis=1)
    rhs = _estimate(per_pair)
    se = math.hypot(lhs.std_error, rhs.std_error)
    return TriangleCheck(lhs.value, rhs.value, se, lhs.value <= rhs.value + 3 * se)


def example_seed(mc: MCConfig, index: int) -> MCConfig:
    """Per-example Monte-Carlo config derived from ``(mc.seed, index)``."""
    return MCConfig(mc.n_pairs, derive_seed(mc.seed, "metrics-example", index))


def _binned(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Histogram counts; values outside the edges land in the end bins, so the
    counts always sum to ``len(values)``."""
    return np.histogram(np.clip(values, edges[0], edges[-1]), bins=edges)[0]


def dataset_expectation(ds: LabeledDataset, metric, params, atk: AttackConfig, mc: MCConfig,
                        bin_edges=None):
    """Mean of a per-example metric over ``ds`` plus a histogram on fixed edges.

    ``metric(x, y, params, atk, mc)`` may return a float or an :class:`Estimate`.
    Examples whose metric raises are excluded and counted. Returns
    ``(mean, (counts, edges), values, failures)``.
    """
    if len(ds) == 0:
        raise MetricError("empty dataset")
    values, failures = [], 0
    for i in range(len(ds)):
        try:
            values.append(float(metric(ds.inputs[i], int(ds.labels[i]), params, atk, example_seed(mc, i))))
        except (MetricError, ArithmeticError):
            failures += 1
    if not values:
        raise MetricError("metric failed on every example")
    values = np.array(values)
    edges = np.asarray(bin_edges if bin_edges is not None else np.histogram_bin_edges(values, 20), dtype=float)
    counts = _binned(values, edges)
    return float(np.mean(values)), (counts, edges), values, failures


def default_edges(d: int, epsilon: float, bins: int = 20) -> dict[str, np.ndarray]:
    """Bin edges covering each statistic's attainable range.

    ``||Z - Z'||^2 <= d (2 eps)^2``, ``||Z - x|| <= sqrt(d) eps``, angles in [0, pi].
    """
    top_g = 4 * d * epsilon ** 2 or 1.0
    top_d = math.sqrt(d) * epsilon or 1.0
    return {"gamma": np.linspace(0.0, top_g, bins + 1),
            "d": np.linspace(0.0, top_d, bins + 1),
            "phi": np.linspace(0.0, math.pi, bins + 1)}


def dataset_metrics(ds: LabeledDataset, params: models.Params, atk: AttackConfig, mc: MCConfig,
                    t: int = 0, split: str = "", edges: dict | None = None,
                    chunk_rows: int = 8192) -> MetricsReport:
    """All three statistics for every example from one shared sample per example.

    Several examples are pushed through PGD in one batch; each example still
    draws its starts from its own substream ``example_seed(mc, i)``.
    """
    n = len(ds)
    if n == 0:
        raise MetricError("empty dataset")
    d = int(np.prod(ds.input_shape))
    edges = edges or default_edges(d, atk.epsilon)
    per_chunk = max(1, chunk_rows // (2 * mc.n_pairs))
    gam, gam_se, dist, phi = [], [], [], []
    failures = 0
    for lo in range(0, n, per_chunk):
        idx = range(lo, min(n, lo + per_chunk))
        starts = np.concatenate([
            draw_starts(ds.inputs[i], atk.epsilon, 2 * mc.n_pairs, np.random.default_rng(example_seed(mc, i).seed))
            for i in idx])
        rep = 2 * mc.n_pairs
        anchors = np.repeat(ds.inputs[list(idx)], rep, axis=0)
        labels = np.repeat(ds.labels[list(idx)], rep)
        out = pgd_k(starts, anchors, labels, params, atk).reshape(len(idx), rep, -1)
        for j, i in enumerate(idx):
            z, zp = out[j, :mc.n_pairs], out[j, mc.n_pairs:]
            sq, dd, angles, _ = _pair_stats(ds.inputs[i].reshape(-1), z, zp)
            g = _estimate(sq)
            gam.append(g.value)
            gam_se.append(g.std_error)
            dist.append(float(np.mean(dd)))
            if len(angles):
                phi.append(float(np.mean(angles)))
            else:
                failures += 1
    gam, dist, phi = np.array(gam), np.array(dist), np.array(phi)
    # spread of per-example estimates across the dataset
    eld_se = float(np.std(gam, ddof=1) / math.sqrt(n)) if n > 1 else float(gam_se[0])
    values = {"gamma": gam, "d": dist, "phi": phi}
    hists = {k: (_binned(v, edges[k]), edges[k]) for k, v in values.items()}
    return MetricsReport(t, float(gam.mean()), eld_se, float(dist.mean()),
                         float(phi.mean()) if len(phi) else float("nan"), split, values, hists, failures)
