"""Small classifiers (MLP and a two-conv CNN) built on :mod:`idelab.autodiff`."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping

import numpy as np

from .autodiff import Graph, Node

MLP = "mlp"
SMALL_CNN = "small-cnn"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor.

    For ``mlp``, ``widths`` is the full layer-width list ``[d, h1, ..., K]``.
    For ``small-cnn``, ``widths`` holds the two conv channel counts and the
    input shape must be ``(1, H, W)``; the net is
    conv3x3 -> relu -> pool -> conv3x3 -> relu -> pool -> affine -> K.
    """

    kind: str
    input_shape: tuple[int, ...]
    num_classes: int
    widths: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ModelError("need at least 2 classes")
        if any(s < 1 for s in self.input_shape) or not self.input_shape:
            raise ModelError(f"bad input shape {self.input_shape}")
        if self.kind == MLP:
            if len(self.widths) < 2 or any(w < 1 for w in self.widths):
                raise ModelError("mlp widths must list at least input and output widths")
            if self.widths[0] != self.input_dim:
                raise ModelError(f"mlp input width {self.widths[0]} != input dim {self.input_dim}")
            if self.widths[-1] != self.num_classes:
                raise ModelError("final layer width must equal the class count")
        elif self.kind == SMALL_CNN:
            if len(self.input_shape) != 3 or self.input_shape[0] != 1:
                raise ModelError("small-cnn expects input shape (1, H, W)")
            if min(self.input_shape[1:]) < 4:
                raise ModelError("small-cnn needs H, W >= 4")
            if len(self.widths) != 2 or any(w < 1 for w in self.widths):
                raise ModelError("small-cnn widths are the two conv channel counts")
        else:
            raise ModelError(f"unknown model kind {self.kind!r}")

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @classmethod
    def mlp(cls, widths, input_shape=None) -> "ModelSpec":
        widths = tuple(widths)
        return cls(MLP, input_shape or (widths[0],), widths[-1], widths)

    @classmethod
    def small_cnn(cls, input_shape=(1, 28, 28), num_classes=10, channels=(8, 16)) -> "ModelSpec":
        return cls(SMALL_CNN, input_shape, num_classes, tuple(channels))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "widths": list(self.widths)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(d["kind"], tuple(d["input_shape"]), int(d["num_classes"]), tuple(d.get("widths", ())))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == MLP:
            shapes = {}
            for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
                shapes[f"fc{i}.weight"] = (a, b)
                shapes[f"fc{i}.bias"] = (b,)
            return shapes
        c1, c2 = self.widths
        h, w = self.input_shape[1:]
        h, w = h // 2 // 2, w // 2 // 2
        return {
            "conv0.weight": (c1, 1, 3, 3), "conv0.bias": (c1,),
            "conv1.weight": (c2, c1, 3, 3), "conv1.bias": (c2,),
            "fc.weight": (c2 * h * w, self.num_classes), "fc.bias": (self.num_classes,),
        }


@dataclass(frozen=True)
class Params:
    spec: ModelSpec
    tensors: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if set(expected) != set(self.tensors):
            raise ModelError(f"parameter names {sorted(self.tensors)} do not match spec")
        for name, shape in expected.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise ModelError(f"{name}: shape {t.shape} != {shape}")
            if not np.all(np.isfinite(t)):
                raise ModelError(f"{name}: non-finite entries")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def replace(self, tensors: Mapping[str, np.ndarray]) -> "Params":
        return Params(self.spec, {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()})

    def equals(self, other: "Params") -> bool:
        """Bit-exact equality of spec and every tensor."""
        return (self.spec == other.spec and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors))


def init(spec: ModelSpec, seed: int) -> Params:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return Params(spec, tensors)


@dataclass(frozen=True)
class ModelGraph:
    graph: Graph
    logits: Node
    losses: Node


def _build(spec: ModelSpec, reduction: str) -> ModelGraph:
    g = Graph()
    x = g.input("x", (None,) + spec.input_shape)
    y = g.input("y", (None,), dtype="int")
    p = {name: g.param(name, shape) for name, shape in spec.param_shapes().items()}
    if spec.kind == MLP:
        h = x if len(spec.input_shape) == 1 else g.flatten(x)
        n = len(spec.widths) - 1
        for i in range(n):
            h = g.affine(h, p[f"fc{i}.weight"], p[f"fc{i}.bias"])
            if i < n - 1:
                h = g.relu(h)
    else:
        h = g.maxpool2(g.relu(g.conv2d(x, p["conv0.weight"], p["conv0.bias"])))
        h = g.maxpool2(g.relu(g.conv2d(h, p["conv1.weight"], p["conv1.bias"])))
        h = g.affine(g.flatten(h), p["fc.weight"], p["fc.bias"])
    losses = g.softmax_xent(h, y)
    g.set_output(g.mean(losses) if reduction == "mean" else g.sum(losses))
    return ModelGraph(g, h, losses)


@lru_cache(maxsize=32)
def model_graph(spec: ModelSpec, reduction: str = "mean") -> ModelGraph:
    """Cached graph for ``spec``; the root is the mean (or sum) of per-example losses."""
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    return _build(spec, reduction)


def _batch(spec: ModelSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == spec.input_shape:
        return x[None], True
    if x.shape[1:] != spec.input_shape:
        raise ModelError(f"input shape {x.shape} incompatible with {spec.input_shape}")
    return x, False


def _labels(spec: ModelSpec, y, n: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y))
    if y.shape != (n,):
        raise ModelError(f"expected {n} labels, got shape {y.shape}")
    if np.any(y < 0) or np.any(y >= spec.num_classes):
        raise ModelError(f"label out of range [0, {spec.num_classes})")
    return y.astype(np.int64)


def bindings(params: Params, x: np.ndarray, y: np.ndarray) -> dict:
    return {"x": x, "y": y, **params.tensors}


def forward(params: Params, x, y, reduction: str = "mean"):
    """Run the loss graph; returns ``(root_loss, per_example_losses, logits, graph)``."""
    spec = params.spec
    xb, _ = _batch(spec, x)
    yb = _labels(spec, y, len(xb))
    mg = model_graph(spec, reduction)
    root = mg.graph.forward(bindings(params, xb, yb))
    return float(root), mg.graph.value(mg.losses), mg.graph.value(mg.logits), mg.graph


def loss(params: Params, x, y) -> float:
    """Mean cross-entropy over the batch (a single example gives its own loss)."""
    return forward(params, x, y)[0]


def per_example_loss(params: Params, x, y) -> np.ndarray:
    return forward(params, x, y)[1].copy()


def loss_and_grads(params: Params, x, y, wrt=None, reduction: str = "mean"):
    """Loss plus gradients w.r.t. ``wrt`` leaves (default: all parameters)."""
    value, _, _, g = forward(params, x, y, reduction)
    names = list(params.tensors) if wrt is None else list(wrt)
    return value, g.backward(names)


def logits(params: Params, x) -> np.ndarray:
    spec = params.spec
    xb, single = _batch(spec, x)
    out = forward(params, xb, np.zeros(len(xb), dtype=np.int64))[2].copy()
    return out[0] if single else out


def predict(params: Params, x):
    """Argmax class; ties resolve to the smallest index."""
    z = logits(params, x)
    return int(np.argmax(z)) if z.ndim == 1 else np.argmax(z, axis=1)
