import numpy as np
import pytest

from idelab import models
from idelab.data import gen_blobs
from idelab.training import TrainConfig, standard_train


def linear_params(w, b):
    """Params for a single affine layer ``[d, K]`` (a linear classifier)."""
    w = np.asarray(w, dtype=float)
    spec = models.ModelSpec.mlp([w.shape[0], w.shape[1]])
    return models.Params(spec, {"fc0.weight": w, "fc0.bias": np.asarray(b, dtype=float)})


@pytest.fixture(scope="session")
def blobs():
    ds = gen_blobs(d=4, K=2, n_per_class=60, separation=0.6, spread=0.05, seed=3)
    return ds.subset(range(80)), ds.subset(range(80, 120))


@pytest.fixture(scope="session")
def trained_mlp(blobs):
    tr, _ = blobs
    spec = models.ModelSpec.mlp([4, 16, 2])
    params, _ = standard_train(spec, tr, TrainConfig(epochs=30, batch_size=16, lr=0.1, seed=0))
    return params


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
