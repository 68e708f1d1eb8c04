import numpy as np
import pytest

from idelab import data
from idelab.attack import AttackConfig
from idelab.data import DataError, LabeledDataset
from idelab.models import ModelSpec
from idelab.training import TrainConfig, eval_errors, standard_train


def test_blob_counts_and_balance():
    ds = data.gen_blobs(d=3, K=2, n_per_class=10, separation=0.5, spread=0.1, seed=0)
    assert len(ds) == 20
    assert np.bincount(ds.labels).tolist() == [10, 10]
    assert ds.inputs.min() >= 0 and ds.inputs.max() <= 1


def test_blobs_deterministic():
    a = data.gen_blobs(3, 4, 10, 0.5, 0.1, seed=5)
    assert a.equals(data.gen_blobs(3, 4, 10, 0.5, 0.1, seed=5))
    assert not a.equals(data.gen_blobs(3, 4, 10, 0.5, 0.1, seed=6))


def test_well_separated_blobs_are_linearly_separable():
    ds = data.gen_blobs(d=5, K=4, n_per_class=50, separation=0.6, spread=0.03, seed=1)
    spec = ModelSpec.mlp([5, 4])
    p, _ = standard_train(spec, ds, TrainConfig(epochs=60, batch_size=20, lr=0.5, seed=0))
    assert eval_errors(p, ds).standard_error <= 0.01


def test_blob_means_spacing():
    m = data.blob_means(4, 4, 0.4)
    assert np.allclose(m[:, 2:], 0.5)
    assert np.linalg.norm(m[0] - m[1]) == pytest.approx(0.4)


def test_bad_blob_arguments():
    with pytest.raises(DataError):
        data.gen_blobs(3, 2, 5, separation=0.0, spread=0.1, seed=0)
    with pytest.raises(DataError):
        data.gen_blobs(1, 4, 5, separation=0.2, spread=0.1, seed=0)


def test_dataset_validation():
    with pytest.raises(DataError):
        LabeledDataset(np.array([[1.5]]), np.array([0]), 2)
    with pytest.raises(DataError):
        LabeledDataset(np.array([[0.5]]), np.array([2]), 2)
    with pytest.raises(DataError):
        LabeledDataset(np.array([[np.nan]]), np.array([0]), 2)
    with pytest.raises(DataError):
        LabeledDataset(np.zeros((2, 1)), np.array([0]), 2)


def write_pair(tmp_path, images, labels):
    ip, lp = tmp_path / "img", tmp_path / "lab"
    data.write_idx(images, labels, ip, lp)
    return ip, lp


def test_idx_round_trip_and_scaling(tmp_path):
    images = np.zeros((3, 4, 5), dtype=np.uint8)
    images[0, 0, 0] = 255
    images[1, 2, 3] = 128
    labels = np.array([7, 0, 9], dtype=np.uint8)
    ds = data.load_idx(*write_pair(tmp_path, images, labels))
    assert ds.inputs.shape == (3, 1, 4, 5)
    assert ds.inputs[0, 0, 0, 0] == 1.0
    assert ds.inputs[1, 0, 2, 3] == 128 / 255
    assert ds.labels.tolist() == [7, 0, 9]


def test_idx_magic_numbers(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((2, 2, 2), np.uint8), np.zeros(2, np.uint8))
    assert int.from_bytes(ip.read_bytes()[:4], "big") == 2051
    assert int.from_bytes(lp.read_bytes()[:4], "big") == 2049
    with pytest.raises(DataError, match="magic"):
        data.load_idx(lp, ip)


def test_idx_truncated_payload(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((2, 3, 3), np.uint8), np.zeros(2, np.uint8))
    ip.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(DataError, match="payload"):
        data.load_idx(ip, lp)
    ip.write_bytes(ip.read_bytes()[:10])
    with pytest.raises(DataError):
        data.load_idx(ip, lp)


def test_idx_gzip_and_count_mismatch(tmp_path):
    import gzip
    ip, lp = write_pair(tmp_path, np.full((2, 2, 2), 3, np.uint8), np.array([1, 2], np.uint8))
    gz = tmp_path / "img.gz"
    gz.write_bytes(gzip.compress(ip.read_bytes()))
    assert data.load_idx(gz, lp).equals(data.load_idx(ip, lp))
    ip2, lp2 = write_pair(tmp_path, np.zeros((3, 2, 2), np.uint8), np.zeros(2, np.uint8))
    with pytest.raises(DataError):
        data.load_idx(ip2, lp2)


def test_split_sizes_partition_and_determinism():
    ds = data.gen_blobs(2, 2, 50, 0.5, 0.1, seed=0)
    a, b = data.split(ds, 0.8, seed=1)
    assert (len(a), len(b)) == (80, 20)
    rows = {tuple(r) for r in np.vstack([a.inputs, b.inputs])}
    assert rows == {tuple(r) for r in ds.inputs}
    a2, _ = data.split(ds, 0.8, seed=1)
    assert a.equals(a2)
    with pytest.raises(DataError):
        data.split(ds, 1.0, 0)


def test_induced_with_zero_eps_is_identity(trained_mlp, blobs):
    tr, _ = blobs
    out = data.materialize_induced(tr, trained_mlp, AttackConfig(0.0, 0.1, 5))
    np.testing.assert_array_equal(out.inputs, tr.inputs)
    np.testing.assert_array_equal(out.labels, tr.labels)


def test_induced_respects_ball(trained_mlp, blobs):
    tr, _ = blobs
    out = data.materialize_induced(tr, trained_mlp, AttackConfig(0.07, 0.02, 5))
    assert len(out) == len(tr)
    assert np.max(np.abs(out.inputs - tr.inputs)) <= 0.07 + 1e-12
    assert out.inputs.min() >= 0 and out.inputs.max() <= 1
    np.testing.assert_array_equal(out.labels, tr.labels)


def test_csv_round_trip(tmp_path):
    ds = data.gen_blobs(3, 3, 4, 0.5, 0.1, seed=2)
    data.write_csv(ds, tmp_path / "b.csv")
    back = data.read_csv(tmp_path / "b.csv", 3)
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.labels, ds.labels)
