import numpy as np
import pytest

from idelab import models
from idelab.attack import AttackConfig, brute_force_inner_max
from idelab.data import LabeledDataset, gen_blobs
from idelab.models import ModelSpec
from idelab.seeding import derive_seed
from idelab.training import (TrainConfig, TrainingDiverged, eval_errors, pgd_at_train, robust_gap,
                             standard_train)

from conftest import linear_params


def test_separable_blobs_reach_zero_train_error(blobs):
    tr, _ = blobs
    p, hist = standard_train(ModelSpec.mlp([4, 16, 2]), tr, TrainConfig(50, 16, 0.1, seed=1))
    assert eval_errors(p, tr).standard_error == 0.0
    assert len(hist) == 50


def test_zero_learning_rate_keeps_init(blobs):
    tr, _ = blobs
    spec = ModelSpec.mlp([4, 8, 2])
    cfg = TrainConfig(3, 16, 0.0, seed=4)
    p, _ = standard_train(spec, tr, cfg)
    assert p.equals(models.init(spec, derive_seed(4, "init")))


def test_same_seed_same_history(blobs):
    tr, _ = blobs
    spec = ModelSpec.mlp([4, 8, 2])
    cfg = TrainConfig(4, 16, 0.1, seed=2, momentum=0.5, weight_decay=1e-3)
    a, ha = standard_train(spec, tr, cfg)
    b, hb = standard_train(spec, tr, cfg)
    assert ha == hb and a.equals(b)


def test_zero_eps_adversarial_training_is_standard_training(blobs):
    tr, _ = blobs
    spec = ModelSpec.mlp([4, 8, 2])
    cfg = TrainConfig(5, 16, 0.1, seed=3, schedule=(1, 3, 5))
    traj = pgd_at_train(spec, tr, cfg, AttackConfig(0.0, 0.01, 5))
    p, hist = standard_train(spec, tr, cfg)
    assert traj.final.params.equals(p)
    assert traj.history == hist
    assert [c.t for c in traj] == [1, 3, 5]


def test_single_step_matches_hand_gradient(monkeypatch):
    p0 = linear_params([[0.3, -0.2]], [0.1, 0.0])
    ds = LabeledDataset(np.array([[0.5]]), np.array([1]), 2)
    cfg = TrainConfig(1, 1, 0.5, seed=0)
    # hand-computed: dL/dz = softmax(z) - onehot, z = x W + b
    z = np.array([0.5 * 0.3 + 0.1, 0.5 * -0.2])
    s = np.exp(z) / np.exp(z).sum()
    dz = s - np.array([0.0, 1.0])
    spec = p0.spec
    monkeypatch.setattr(models, "init", lambda spec_, seed: p0)
    p1, _ = standard_train(spec, ds, cfg)
    np.testing.assert_allclose(p1["fc0.weight"], p0["fc0.weight"] - 0.5 * 0.5 * dz[None, :], atol=1e-15)
    np.testing.assert_allclose(p1["fc0.bias"], p0["fc0.bias"] - 0.5 * dz, atol=1e-15)


def test_weight_decay_and_momentum_change_trajectory(blobs):
    tr, _ = blobs
    spec = ModelSpec.mlp([4, 8, 2])
    base, _ = standard_train(spec, tr, TrainConfig(2, 16, 0.1, seed=0))
    wd, _ = standard_train(spec, tr, TrainConfig(2, 16, 0.1, seed=0, weight_decay=0.1))
    mom, _ = standard_train(spec, tr, TrainConfig(2, 16, 0.1, seed=0, momentum=0.9))
    assert not base.equals(wd) and not base.equals(mom)
    assert sum(np.sum(v ** 2) for v in wd.tensors.values()) < sum(np.sum(v ** 2) for v in base.tensors.values())


def test_lr_schedule_is_piecewise_constant():
    cfg = TrainConfig(10, 8, 0.1, seed=0, lr_milestones=(3, 6), lr_decay=0.5)
    assert [cfg.lr_at(e) for e in (1, 3, 4, 6, 7, 10)] == [0.1, 0.1, 0.05, 0.05, 0.025, 0.025]


def test_target_error_stops_early(blobs):
    tr, _ = blobs
    _, hist = standard_train(ModelSpec.mlp([4, 16, 2]), tr,
                             TrainConfig(200, 16, 0.1, seed=1, target_train_error=0.0))
    assert len(hist) < 200
    assert hist[-1]["train_error"] == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(blobs):
    tr, _ = blobs
    with pytest.raises(TrainingDiverged):
        standard_train(ModelSpec.mlp([4, 8, 2]), tr, TrainConfig(3, 16, 1e308, seed=0))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(5, 0, 0.1, 0)
    with pytest.raises(ValueError):
        TrainConfig(5, 8, 0.1, 0, schedule=(3, 2))
    with pytest.raises(ValueError):
        TrainConfig(5, 8, 0.1, 0, schedule=(6,))
    with pytest.raises(ValueError):
        TrainConfig(5, 8, 0.1, 0, momentum=1.0)


def test_memorizer_has_zero_standard_error(trained_mlp, blobs):
    tr, _ = blobs
    assert eval_errors(trained_mlp, tr).standard_error == 0.0
    assert eval_errors(trained_mlp, tr).robust_error is None


def test_zero_eps_robust_error_equals_standard(trained_mlp, blobs):
    _, te = blobs
    r = eval_errors(trained_mlp, te, AttackConfig(0.0, 0.1, 3))
    assert r.robust_error == r.standard_error
    assert r.mean_robust_loss == r.mean_loss


def test_linear_robust_error_matches_brute_force():
    rng = np.random.default_rng(0)
    eps = 0.1
    p = linear_params(rng.normal(size=(2, 2)) * 5, rng.normal(size=2))
    x = rng.uniform(0.2, 0.8, size=(30, 2))
    y = rng.integers(0, 2, 30)
    ds = LabeledDataset(x, y, 2)
    pgd = eval_errors(p, ds, AttackConfig(eps, 2 * eps, 1)).robust_error
    wrong = 0
    for xi, yi in zip(x, y):
        v, _ = brute_force_inner_max(xi, int(yi), p, eps, 3)
        wrong += models.predict(p, v) != yi
    assert pgd == wrong / len(x)


def test_gap_identical_sets_is_zero(trained_mlp, blobs):
    tr, _ = blobs
    traj = pgd_at_train(trained_mlp.spec, tr, TrainConfig(2, 16, 0.1, seed=0, schedule=(1, 2)),
                        AttackConfig(0.05, 0.02, 3))
    assert robust_gap(traj, tr, tr, AttackConfig(0.05, 0.02, 3)) == [0.0, 0.0]


def test_gap_at_zero_eps_is_standard_gap(blobs):
    tr, te = blobs
    atk = AttackConfig(0.0, 0.01, 1)
    traj = pgd_at_train(ModelSpec.mlp([4, 16, 2]), tr, TrainConfig(30, 16, 0.1, seed=0, schedule=(30,)), atk)
    gap = robust_gap(traj, tr, te, atk)[0]
    p = traj.final.params
    assert gap == abs(eval_errors(p, te).standard_error - eval_errors(p, tr).standard_error)


def test_overfit_regime_has_positive_gap():
    ds = gen_blobs(d=20, K=2, n_per_class=110, separation=0.3, spread=0.15, seed=0)
    tr, te = ds.subset(range(40)), ds.subset(range(40, 220))
    atk = AttackConfig(0.05, 0.0125, 5)
    traj = pgd_at_train(ModelSpec.mlp([20, 128, 2]), tr,
                        TrainConfig(40, 8, 0.05, seed=0, momentum=0.9, schedule=(40,)), atk)
    assert robust_gap(traj, tr, te, atk)[0] > 0
