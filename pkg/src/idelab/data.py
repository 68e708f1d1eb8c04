"""Datasets: synthetic blobs, MNIST IDX files, CSV export, induced datasets."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    """Inputs stacked as ``(n, *input_shape)`` float64 in [0, 1], integer labels ``(n,)``."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels).astype(np.int64)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)
        if x.ndim < 2:
            raise DataError("inputs must be stacked as (n, *input_shape)")
        if y.shape != (len(x),):
            raise DataError(f"{len(x)} inputs but labels have shape {y.shape}")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataError("label out of range")
        if not np.all(np.isfinite(x)):
            raise DataError("non-finite input values")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise DataError("input values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx, name: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes,
                              self.name if name is None else name)

    def equals(self, other: "LabeledDataset") -> bool:
        return (self.num_classes == other.num_classes
                and np.array_equal(self.inputs, other.inputs)
                and np.array_equal(self.labels, other.labels))


def blob_means(d: int, K: int, separation: float) -> np.ndarray:
    """Class centres on a scaled hypercube lattice.

    Class ``c`` sits at 0.5 in every coordinate except the first
    ``b = ceil(log2 K)``, where coordinate ``j`` is ``0.5 +/- separation / 2``
    according to bit ``j`` of ``c``. Adjacent classes are ``separation`` apart.
    """
    b = max(1, math.ceil(math.log2(K)))
    if b > d:
        raise DataError(f"need d >= {b} to place {K} classes")
    means = np.full((K, d), 0.5)
    for c in range(K):
        for j in range(b):
            means[c, j] += separation / 2 * (1 if (c >> j) & 1 else -1)
    return means


def gen_blobs(d: int, K: int, n_per_class: int, separation: float, spread: float, seed: int,
              smooth_eps: float = 0.0, name: str = "blobs") -> LabeledDataset:
    """Isotropic Gaussian blobs around :func:`blob_means`, clipped to [0, 1].

    ``smooth_eps > 0`` adds uniform noise on [-smooth_eps, smooth_eps]^d to each
    point after sampling (then clips again), producing an eps-smoothed version of
    a robust base distribution.
    """
    if d < 1 or K < 2 or n_per_class < 1:
        raise DataError("degenerate blob dimensions")
    if separation <= 0 or spread < 0:
        raise DataError("separation must be positive and spread non-negative")
    rng = np.random.default_rng(seed)
    means = blob_means(d, K, separation)
    labels = np.repeat(np.arange(K), n_per_class)
    x = means[labels] + spread * rng.standard_normal((len(labels), d))
    if smooth_eps > 0:
        x = x + rng.uniform(-smooth_eps, smooth_eps, size=x.shape)
    order = rng.permutation(len(labels))
    return LabeledDataset(np.clip(x[order], 0.0, 1.0), labels[order], K, name)


def _read_idx(path, magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 8:
        raise DataError(f"{path}: file too short for an IDX header")
    got, n = struct.unpack(">ii", raw[:8])
    if got != magic:
        raise DataError(f"{path}: bad magic number {got} (expected {magic})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(">" + "i" * ndim, raw[4:header])
    payload = raw[header:]
    need = int(np.prod(dims))
    if len(payload) != need:
        raise DataError(f"{path}: payload has {len(payload)} bytes, header promises {need}")
    return dims, payload


def load_idx(images_path, labels_path, limit: int | None = None, name: str = "mnist") -> LabeledDataset:
    """Read an IDX image/label pair (unsigned-byte data), scaling pixels by 1/255."""
    idims, ipay = _read_idx(images_path, IDX_IMAGE_MAGIC)
    ldims, lpay = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if idims[0] != ldims[0]:
        raise DataError(f"{idims[0]} images but {ldims[0]} labels")
    images = np.frombuffer(ipay, dtype=np.uint8).reshape(idims[0], 1, *idims[1:])
    labels = np.frombuffer(lpay, dtype=np.uint8).astype(np.int64)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return LabeledDataset(images.astype(np.float64) / 255.0, labels, 10, name)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(n, H, W)`` and labels ``(n,)`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">iiii", IDX_IMAGE_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">ii", IDX_LABEL_MAGIC, len(labels)) + labels.tobytes())


def split(ds: LabeledDataset, fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Shuffle by ``seed`` and cut into ``round(fraction * n)`` / remainder."""
    if not 0 < fraction < 1:
        raise DataError("fraction must be in (0, 1)")
    n = len(ds)
    cut = int(round(fraction * n))
    if cut == 0 or cut == n:
        raise DataError(f"split of {n} examples at {fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    return ds.subset(perm[:cut], f"{ds.name}-a"), ds.subset(perm[cut:], f"{ds.name}-b")


def materialize_induced(ds: LabeledDataset, params, atk, seed: int = 0,
                        batch_size: int = 256) -> LabeledDataset:
    """Replace every input by its PGD image ``Q(x)`` under ``params``; labels kept."""
    from .attack import attack_batch

    if ds.input_shape != params.spec.input_shape:
        raise DataError(f"dataset shape {ds.input_shape} vs model {params.spec.input_shape}")
    rng = np.random.default_rng(seed)
    out = np.empty_like(ds.inputs)
    for lo in range(0, len(ds), batch_size):
        hi = min(lo + batch_size, len(ds))
        out[lo:hi] = attack_batch(ds.inputs[lo:hi], ds.labels[lo:hi], params, atk, rng)
    return LabeledDataset(out, ds.labels.copy(), ds.num_classes, f"{ds.name}-induced")


def write_csv(ds: LabeledDataset, path) -> None:
    """One row per example: flattened input values, then the label."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        d = int(np.prod(ds.input_shape))
        w.writerow([f"x{i}" for i in range(d)] + ["label"])
        for x, y in zip(ds.inputs.reshape(len(ds), -1), ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def read_csv(path, num_classes: int, input_shape=None, name: str = "csv") -> LabeledDataset:
    rows = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        rows = [row for row in r if row]
    if not rows:
        raise DataError(f"{path}: no rows")
    arr = np.array([[float(v) for v in row[:-1]] for row in rows])
    labels = np.array([int(row[-1]) for row in rows])
    if input_shape is not None:
        arr = arr.reshape(len(arr), *input_shape)
    return LabeledDataset(arr, labels, num_classes, name)
