import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idelab import models
from idelab.attack import (AttackConfig, AttackError, attack_batch, brute_force_inner_max, initial_point,
                           input_grad, pgd_k, pgd_step, project_linf)
from idelab.models import ModelSpec

from conftest import linear_params

unit = st.floats(0.0, 1.0)


def test_projection_inside_ball_is_noop():
    x = np.array([0.5, 0.2])
    v = np.array([0.55, 0.18])
    np.testing.assert_array_equal(project_linf(v, x, 0.1), v)


def test_projection_scalar_clamp():
    assert project_linf(0.75, 0.5, 0.1) == pytest.approx(0.6)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(unit, st.floats(-0.5, 1.5)), min_size=1, max_size=3), st.floats(0.0, 0.5))
def test_projection_matches_grid_argmin(pairs, eps):
    x = np.array([p[0] for p in pairs])
    v = np.array([p[1] for p in pairs])
    got = project_linf(v, x, eps)
    # oracle: coordinatewise nearest point of a fine grid over the feasible interval
    for i in range(len(x)):
        lo, hi = max(x[i] - eps, 0.0), min(x[i] + eps, 1.0)
        grid = np.linspace(lo, hi, 2001)
        best = grid[np.argmin(np.abs(grid - v[i]))]
        assert abs(got[i] - best) <= (hi - lo) / 2000 + 1e-12
    np.testing.assert_array_equal(project_linf(got, x, eps), got)


def test_zero_gradient_at_center_is_fixed_point():
    spec = ModelSpec.mlp([3, 2])
    p = models.Params(spec, {"fc0.weight": np.zeros((3, 2)), "fc0.bias": np.zeros(2)})
    x = np.array([0.3, 0.5, 0.7])
    np.testing.assert_array_equal(pgd_step(x, x, 0, p, AttackConfig(0.1, 0.05, 1)), x)


def test_exiting_coordinates_land_on_boundary():
    p = linear_params([[1.0, -1.0], [-2.0, 2.0]], [0.0, 0.0])
    x = np.array([0.5, 0.5])
    out = pgd_step(x, x, 0, p, AttackConfig(0.1, 0.3, 1))
    np.testing.assert_array_equal(out, [0.4, 0.6])


def test_step_direction_follows_finite_difference_slope():
    rng = np.random.default_rng(0)
    for _ in range(20):
        w = rng.normal(size=(1, 2))
        p = linear_params(w, rng.normal(size=2))
        x, y = np.array([rng.uniform(0.2, 0.8)]), int(rng.integers(0, 2))
        h = 1e-6
        slope = (models.loss(p, x + h, y) - models.loss(p, x - h, y)) / (2 * h)
        out = pgd_step(x, x, y, p, AttackConfig(0.1, 0.01, 1))
        assert np.sign(out[0] - x[0]) == np.sign(slope)


def test_zero_steps_returns_projected_start():
    p = linear_params([[1.0, 0.0]], [0.0, 0.0])
    x = np.array([0.5])
    x0 = np.array([0.55])
    np.testing.assert_array_equal(pgd_k(x0, x, 0, p, AttackConfig(0.1, 0.05, 0)), x0)
    np.testing.assert_array_equal(pgd_k(np.array([0.9]), x, 0, p, AttackConfig(0.1, 0.05, 0)), [0.6])


def test_zero_epsilon_returns_anchor():
    p = linear_params([[3.0, -1.0], [0.5, 2.0]], [0.1, 0.0])
    x = np.array([0.3, 0.6])
    for k in (0, 1, 7):
        np.testing.assert_array_equal(pgd_k(x + 0.2, x, 1, p, AttackConfig(0.0, 0.1, k)), x)


def corner_max(p, x, y, eps):
    best, arg = -np.inf, None
    for signs in itertools.product((-1.0, 1.0), repeat=len(x)):
        v = np.clip(x + eps * np.array(signs), 0, 1)
        loss = models.loss(p, v, y)
        if loss > best:
            best, arg = loss, v
    return arg, best


def test_saturating_single_step_hits_worst_corner():
    rng = np.random.default_rng(1)
    for _ in range(30):
        d = int(rng.integers(1, 11))
        eps = 0.1
        p = linear_params(rng.normal(size=(d, 2)), rng.normal(size=2))
        x = rng.uniform(0.2, 0.8, size=d)
        y = int(rng.integers(0, 2))
        out = pgd_k(x, x, y, p, AttackConfig(eps, 2 * eps, 1))
        w = p["fc0.weight"]
        np.testing.assert_allclose(out, x + eps * np.sign(w[:, 1 - y] - w[:, y]), atol=1e-15)
        arg, best = corner_max(p, x, y, eps)
        np.testing.assert_allclose(out, arg, atol=1e-15)
        assert models.loss(p, out, y) == pytest.approx(best, rel=1e-12)


def test_batch_attack_uses_per_row_anchors():
    rng = np.random.default_rng(2)
    p = linear_params(rng.normal(size=(3, 2)), np.zeros(2))
    x = rng.uniform(0.2, 0.8, size=(5, 3))
    y = rng.integers(0, 2, 5)
    cfg = AttackConfig(0.05, 0.02, 4)
    batch = pgd_k(x, x, y, p, cfg)
    for i in range(5):
        np.testing.assert_array_equal(batch[i], pgd_k(x[i], x[i], y[i], p, cfg))


def test_uniform_init_requires_rng_and_stays_in_ball():
    cfg = AttackConfig(0.1, 0.02, 3, init="uniform-random")
    x = np.full((4, 2), 0.95)
    with pytest.raises(AttackError):
        initial_point(x, cfg)
    x0 = initial_point(x, cfg, np.random.default_rng(0))
    assert np.all(np.abs(x0 - x) <= 0.1) and np.all(x0 <= 1)
    p = linear_params([[1.0, -1.0], [1.0, 0.0]], [0.0, 0.0])
    out = attack_batch(x, np.zeros(4, dtype=int), p, cfg, np.random.default_rng(0))
    assert np.all(np.abs(out - x) <= 0.1 + 1e-12)


def test_attack_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(-0.1, 0.1, 1)
    with pytest.raises(ValueError):
        AttackConfig(0.1, 0.0, 2)
    with pytest.raises(ValueError):
        AttackConfig(0.1, 0.1, 1, init="spiral")


def test_input_grad_shape():
    p = models.init(ModelSpec.small_cnn((1, 4, 4), 2, (2, 2)), 0)
    x = np.random.default_rng(0).uniform(size=(3, 1, 4, 4))
    assert input_grad(p, x, np.array([0, 1, 0])).shape == x.shape


def test_brute_force_constant_loss():
    v, best = brute_force_inner_max(np.array([0.4, 0.6]), 0, None, 0.1, 5, loss_fn=lambda V: np.full(len(V), 2.5))
    assert best == 2.5
    np.testing.assert_allclose(v, [0.3, 0.5])


def test_brute_force_linear_loss_at_corner():
    w = np.array([1.0, -2.0, 0.5])
    x = np.array([0.5, 0.5, 0.5])
    v, best = brute_force_inner_max(x, 0, None, 0.1, 7, loss_fn=lambda V: V @ w)
    np.testing.assert_allclose(v, [0.6, 0.4, 0.6])
    assert best == pytest.approx(v @ w)


def test_brute_force_dominates_pgd_on_tiny_mlp():
    rng = np.random.default_rng(3)
    p = models.init(ModelSpec.mlp([2, 6, 2]), 4)
    for _ in range(5):
        x = rng.uniform(0.1, 0.9, size=2)
        y = int(rng.integers(0, 2))
        _, best = brute_force_inner_max(x, y, p, 0.1, 41)
        out = pgd_k(x, x, y, p, AttackConfig(0.1, 0.025, 10))
        assert best >= models.loss(p, out, y) - 1e-12


def test_brute_force_grid_cap():
    with pytest.raises(AttackError):
        brute_force_inner_max(np.zeros(10), 0, None, 0.1, 41, loss_fn=lambda V: V.sum(1))
