"""Static-graph reverse-mode automatic differentiation over numpy arrays.

A :class:`Graph` is built once from leaves (named parameters and inputs) and a
fixed set of operations, then evaluated repeatedly with different bindings::

    g = Graph()
    x = g.input("x", (None, 4))
    w = g.param("w", (4, 3))
    b = g.param("b", (3,))
    y = g.input("y", (None,), dtype="int")
    loss = g.mean(g.softmax_xent(g.affine(x, w, b), y))
    g.set_output(loss)

    g.forward({"x": xs, "y": ys, "w": W, "b": B})
    grads = g.backward(wrt=["w", "b"])

Shapes may use ``None`` for the leading batch axis; every other dimension is
checked at bind time. All float values are float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class GraphError(Exception):
    """Raised on malformed graphs, bad bindings, or misordered calls."""


class ShapeError(GraphError):
    pass


@dataclass(frozen=True)
class Node:
    id: int
    shape: tuple

    @property
    def ndim(self) -> int:
        return len(self.shape)


@dataclass
class _Record:
    op: str
    inputs: tuple[int, ...]
    shape: tuple
    attrs: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# op kernels: forward(values, attrs) -> (out, cache)
#             backward(g, values, out, cache, attrs, needs) -> list of grads
# --------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _affine_fwd(vals, attrs):
    x, w, b = vals
    return x @ w + b, None


def _affine_bwd(g, vals, out, cache, attrs, needs):
    x, w, _ = vals
    return [
        g @ w.T if needs[0] else None,
        x.T @ g if needs[1] else None,
        g.sum(axis=0) if needs[2] else None,
    ]


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B,C,Ho,Wo,kh,kw
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return cols, (b, c, ho, wo, xp.shape)


def _conv_fwd(vals, attrs):
    x, w, b = vals
    o, c, kh, kw = w.shape
    cols, geom = _im2col(x, kh, kw, attrs["padding"])
    bs, _, ho, wo, _ = geom
    out = cols @ w.reshape(o, -1).T + b
    out = out.reshape(bs, ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, geom)


def _conv_bwd(g, vals, out, cache, attrs, needs):
    x, w, _ = vals
    cols, (bs, c, ho, wo, padded_shape) = cache
    o, _, kh, kw = w.shape
    gm = g.transpose(0, 2, 3, 1).reshape(bs * ho * wo, o)
    gx = gw = gb = None
    if needs[1]:
        gw = (gm.T @ cols).reshape(w.shape)
    if needs[2]:
        gb = gm.sum(axis=0)
    if needs[0]:
        dcols = (gm @ w.reshape(o, -1)).reshape(bs, ho, wo, c, kh, kw)
        dxp = np.zeros(padded_shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        pad = attrs["padding"]
        gx = dxp[:, :, pad:pad + x.shape[2], pad:pad + x.shape[3]] if pad else dxp
    return [gx, gw, gb]


def _relu_fwd(vals, attrs):
    (x,) = vals
    return np.maximum(x, 0.0), None


def _relu_bwd(g, vals, out, cache, attrs, needs):
    # subgradient at 0 is 0
    return [g * (vals[0] > 0)]


def _pool_fwd(vals, attrs):
    (x,) = vals
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    win = x[:, :, :2 * h2, :2 * w2].reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h2, w2, 4)
    idx = win.argmax(axis=-1)  # first max wins ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_bwd(g, vals, out, idx, attrs, needs):
    (x,) = vals
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    win = np.zeros((b, c, h2, w2, 4))
    np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
    win = win.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
    gx = np.zeros_like(x)
    gx[:, :, :2 * h2, :2 * w2] = win
    return [gx]


def _flatten_fwd(vals, attrs):
    (x,) = vals
    return x.reshape(x.shape[0], -1), None


def _flatten_bwd(g, vals, out, cache, attrs, needs):
    return [g.reshape(vals[0].shape)]


def _xent_fwd(vals, attrs):
    z, y = vals
    y = y.astype(np.int64)
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    expz = np.exp(shifted)
    sumexp = expz.sum(axis=1, keepdims=True)
    rows = np.arange(z.shape[0])
    loss = np.log(sumexp[:, 0]) - shifted[rows, y]
    return loss, (expz / sumexp, y)


def _xent_bwd(g, vals, out, cache, attrs, needs):
    probs, y = cache
    gz = probs.copy()
    gz[np.arange(len(y)), y] -= 1.0
    return [gz * g[:, None], None]


def _add_fwd(vals, attrs):
    return vals[0] + vals[1], None


def _add_bwd(g, vals, out, cache, attrs, needs):
    return [_unbroadcast(g, vals[0].shape) if needs[0] else None,
            _unbroadcast(g, vals[1].shape) if needs[1] else None]


def _mul_fwd(vals, attrs):
    return vals[0] * vals[1], None


def _mul_bwd(g, vals, out, cache, attrs, needs):
    a, b = vals
    return [_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None]


def _sum_fwd(vals, attrs):
    return np.asarray(vals[0].sum()), None


def _sum_bwd(g, vals, out, cache, attrs, needs):
    return [np.full(vals[0].shape, float(g))]


def _mean_fwd(vals, attrs):
    return np.asarray(vals[0].mean()), None


def _mean_bwd(g, vals, out, cache, attrs, needs):
    x = vals[0]
    return [np.full(x.shape, float(g) / x.size)]


_KERNELS: dict[str, tuple[Callable, Callable]] = {
    "affine": (_affine_fwd, _affine_bwd),
    "conv2d": (_conv_fwd, _conv_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "maxpool2": (_pool_fwd, _pool_bwd),
    "flatten": (_flatten_fwd, _flatten_bwd),
    "softmax_xent": (_xent_fwd, _xent_bwd),
    "add": (_add_fwd, _add_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
}

OP_KINDS = frozenset(_KERNELS)
_LEAF_KINDS = ("input", "param", "const")


def _dims_match(declared: tuple, actual: tuple) -> bool:
    return len(declared) == len(actual) and all(d is None or d == a for d, a in zip(declared, actual))


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    out = []
    for da, db in zip(((1,) * (len(b) - len(a)) + a), ((1,) * (len(a) - len(b)) + b)):
        if da == 1:
            out.append(db)
        elif db == 1 or da == db or db is None:
            out.append(da)
        elif da is None:
            out.append(db)
        else:
            raise ShapeError(f"cannot broadcast {a} with {b}")
    return tuple(out)


class Graph:
    """A frozen-after-build computation graph with a scalar root.

    Nodes are appended in topological order by construction, so backward simply
    walks the record list in reverse. A graph is single-writer: do not run two
    forward/backward sequences on the same instance concurrently.
    """

    def __init__(self) -> None:
        self._records: list[_Record] = []
        self._leaves: dict[str, int] = {}
        self._kinds: dict[str, str] = {}
        self._root: int | None = None
        self._values: list[Any] | None = None
        self._caches: list[Any] | None = None

    # -- construction -----------------------------------------------------

    def _append(self, op: str, inputs: Sequence[Node], shape: tuple, **attrs) -> Node:
        if self._root is not None:
            raise GraphError("graph is frozen; no nodes may be added after set_output")
        for n in inputs:
            if not 0 <= n.id < len(self._records):
                raise GraphError(f"unknown node {n.id}")
        self._records.append(_Record(op, tuple(n.id for n in inputs), tuple(shape), attrs))
        return Node(len(self._records) - 1, tuple(shape))

    def _leaf(self, kind: str, name: str, shape: Sequence, dtype: str = "float") -> Node:
        if name in self._leaves:
            raise GraphError(f"duplicate leaf name {name!r}")
        node = self._append(kind, (), tuple(shape), name=name, dtype=dtype)
        self._leaves[name] = node.id
        self._kinds[name] = kind
        return node

    def input(self, name: str, shape: Sequence, dtype: str = "float") -> Node:
        return self._leaf("input", name, shape, dtype)

    def param(self, name: str, shape: Sequence) -> Node:
        return self._leaf("param", name, shape)

    def constant(self, value) -> Node:
        value = np.asarray(value, dtype=np.float64)
        return self._append("const", (), value.shape, value=value)

    def affine(self, x: Node, w: Node, b: Node) -> Node:
        if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
            raise ShapeError("affine expects x (B, n), w (n, m), b (m,)")
        if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
            raise ShapeError(f"affine shapes {x.shape} {w.shape} {b.shape} disagree")
        return self._append("affine", (x, w, b), (x.shape[0], w.shape[1]))

    def conv2d(self, x: Node, w: Node, b: Node, padding: int = 1) -> Node:
        if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
            raise ShapeError("conv2d expects x (B, C, H, W), w (O, C, kh, kw), b (O,)")
        _, c, h, wd = x.shape
        o, ci, kh, kw = w.shape
        if c != ci or b.shape[0] != o:
            raise ShapeError(f"conv2d channel mismatch {x.shape} {w.shape} {b.shape}")
        ho, wo = h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1
        if ho < 1 or wo < 1:
            raise ShapeError("conv2d kernel larger than padded input")
        return self._append("conv2d", (x, w, b), (x.shape[0], o, ho, wo), padding=padding)

    def relu(self, x: Node) -> Node:
        return self._append("relu", (x,), x.shape)

    def maxpool2(self, x: Node) -> Node:
        if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
            raise ShapeError("maxpool2 expects (B, C, H>=2, W>=2)")
        b, c, h, w = x.shape
        return self._append("maxpool2", (x,), (b, c, h // 2, w // 2))

    def flatten(self, x: Node) -> Node:
        return self._append("flatten", (x,), (x.shape[0], int(np.prod(x.shape[1:]))))

    def softmax_xent(self, logits: Node, labels: Node) -> Node:
        """Per-example cross-entropy of ``logits`` (B, K) against integer ``labels`` (B,)."""
        if logits.ndim != 2 or labels.ndim != 1:
            raise ShapeError("softmax_xent expects logits (B, K) and labels (B,)")
        return self._append("softmax_xent", (logits, labels), (logits.shape[0],))

    def add(self, a: Node, b: Node) -> Node:
        return self._append("add", (a, b), _broadcast_shape(a.shape, b.shape))

    def mul(self, a: Node, b: Node) -> Node:
        return self._append("mul", (a, b), _broadcast_shape(a.shape, b.shape))

    def sum(self, x: Node) -> Node:
        return self._append("sum", (x,), ())

    def mean(self, x: Node) -> Node:
        return self._append("mean", (x,), ())

    def set_output(self, node: Node) -> None:
        """Mark ``node`` as the root and freeze the graph."""
        if self._root is not None:
            raise GraphError("output already set")
        self._root = node.id

    # -- introspection ----------------------------------------------------

    @property
    def root(self) -> Node:
        if self._root is None:
            raise GraphError("graph has no output; call set_output")
        return Node(self._root, self._records[self._root].shape)

    @property
    def parameters(self) -> dict[str, tuple]:
        return {n: self._records[i].shape for n, i in self._leaves.items() if self._kinds[n] == "param"}

    @property
    def inputs(self) -> dict[str, tuple]:
        return {n: self._records[i].shape for n, i in self._leaves.items() if self._kinds[n] == "input"}

    def float_leaves(self) -> list[str]:
        return [n for n, i in self._leaves.items() if self._records[i].attrs["dtype"] == "float"]

    def value(self, node: Node) -> np.ndarray:
        """Cached forward value of ``node`` from the last :meth:`forward`."""
        if self._values is None:
            raise GraphError("no forward pass has been run")
        return self._values[node.id]

    # -- evaluation -------------------------------------------------------

    def forward(self, bindings: Mapping[str, Any]) -> np.ndarray:
        root = self.root
        for name in bindings:
            if name not in self._leaves:
                raise GraphError(f"binding {name!r} does not name a leaf")
        values: list[Any] = [None] * len(self._records)
        caches: list[Any] = [None] * len(self._records)
        for i, rec in enumerate(self._records):
            if rec.op in ("input", "param"):
                name = rec.attrs["name"]
                if name not in bindings:
                    raise GraphError(f"unbound leaf {name!r}")
                dtype = np.int64 if rec.attrs["dtype"] == "int" else np.float64
                v = np.asarray(bindings[name], dtype=dtype)
                if not _dims_match(rec.shape, v.shape):
                    raise ShapeError(f"leaf {name!r} expects shape {rec.shape}, got {v.shape}")
                values[i] = v
            elif rec.op == "const":
                values[i] = rec.attrs["value"]
            else:
                fwd = _KERNELS[rec.op][0]
                values[i], caches[i] = fwd([values[j] for j in rec.inputs], rec.attrs)
        self._values, self._caches = values, caches
        return values[root.id]

    def _requires(self, leaf_ids: set[int]) -> list[bool]:
        req = [False] * len(self._records)
        for i, rec in enumerate(self._records):
            req[i] = i in leaf_ids or any(req[j] for j in rec.inputs)
        return req

    def backward(self, wrt: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        """Gradients of the scalar root with respect to the selected leaves.

        ``wrt`` defaults to every float-valued leaf.
        """
        if self._values is None:
            raise GraphError("backward called before forward")
        root = self.root
        if self._values[root.id].shape != ():
            raise GraphError(f"root must be scalar, got shape {self._values[root.id].shape}")
        names = list(self.float_leaves() if wrt is None else wrt)
        for n in names:
            if n not in self._leaves:
                raise GraphError(f"unknown leaf {n!r}")
            if self._records[self._leaves[n]].attrs["dtype"] != "float":
                raise GraphError(f"leaf {n!r} is not differentiable")
        req = self._requires({self._leaves[n] for n in names})

        grads: list[Any] = [None] * len(self._records)
        grads[root.id] = np.ones(())
        for i in range(root.id, -1, -1):
            g = grads[i]
            rec = self._records[i]
            if g is None or not rec.inputs:
                continue
            needs = [req[j] for j in rec.inputs]
            if not any(needs):
                continue
            bwd = _KERNELS[rec.op][1]
            in_grads = bwd(g, [self._values[j] for j in rec.inputs], self._values[i],
                           self._caches[i], rec.attrs, needs)
            for j, gj, need in zip(rec.inputs, in_grads, needs):
                if not need or gj is None:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        out = {}
        for n in names:
            leaf = self._leaves[n]
            g = grads[leaf]
            out[n] = np.zeros(self._values[leaf].shape) if g is None else g
        return out


def finite_diff_check(graph: Graph, bindings: Mapping[str, Any], step: float = 1e-5,
                      wrt: Iterable[str] | None = None, floor: float = 1e-6) -> float:
    """Max relative error between :meth:`Graph.backward` and central differences.

    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps coordinates whose true gradient is (numerically) zero from
    dividing round-off noise by nothing.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {k: np.array(v, dtype=np.int64 if graph._records[graph._leaves[k]].attrs["dtype"] == "int"
                        else np.float64) for k, v in bindings.items()}
    graph.forward(base)
    names = list(graph.float_leaves() if wrt is None else wrt)
    analytic = graph.backward(names)
    worst = 0.0
    for name in names:
        arr = base[name]
        flat = arr.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(graph.forward(base))
            flat[i] = orig - step
            fm = float(graph.forward(base))
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
            worst = max(worst, err)
    graph.forward(base)
    return worst
