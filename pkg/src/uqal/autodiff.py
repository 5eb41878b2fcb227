"""Small reverse-mode autodiff engine over dense float64 arrays.

Tensors are thin wrappers around ``numpy.ndarray``. A tensor created through
:meth:`Graph.variable` carries a node handle; every op applied to a tensor with
a handle appends a node to the same graph. :func:`backward` walks the graph in
reverse insertion order, which is a valid reverse topological order because a
node can only reference nodes that already exist.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "RngStream",
    "NonFiniteError",
    "ShapeError",
    "constant",
    "elementwise",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "log",
    "relu",
    "clamp",
    "matmul",
    "conv2d",
    "softmax",
    "log_softmax",
    "dropout_apply",
    "dropout_mask",
    "reduce",
    "reshape",
    "transpose",
    "expand",
    "take",
    "bias_add",
    "stack",
    "upsample_nearest",
    "backward",
    "grad",
    "finite_diff_check",
]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    pass


ArrayLike = Union[np.ndarray, float, int, Sequence]


def _as_array(values: ArrayLike) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


@dataclass
class Node:
    op: str
    parents: tuple
    value: np.ndarray
    backward_fn: Optional[Callable]


class Graph:
    """Append-only record of the ops executed in one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, op: str, parents: tuple, value: np.ndarray, backward_fn) -> int:
        for p in parents:
            if p >= len(self.nodes):
                raise RuntimeError("parent node does not precede child")
        self.nodes.append(Node(op, parents, value, backward_fn))
        return len(self.nodes) - 1

    def variable(self, values: ArrayLike) -> "Tensor":
        arr = _as_array(values)
        _check_finite(arr, "variable")
        t = Tensor(arr)
        t.graph = self
        t.node_id = self._append("leaf", (), arr, None)
        return t


class Tensor:
    """Dense float64 array, optionally attached to a :class:`Graph`."""

    __slots__ = ("data", "graph", "node_id")
    __array_priority__ = 100

    def __init__(self, values: ArrayLike):
        arr = values if isinstance(values, np.ndarray) and values.dtype == np.float64 else _as_array(values)
        if arr.size == 0:
            raise ShapeError("tensors must have positive extents")
        self.data = arr
        self.graph: Optional[Graph] = None
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def requires_grad(self) -> bool:
        return self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce("sum", self, axis)

    def mean(self, axis=None):
        return reduce("mean", self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def constant(values: ArrayLike) -> Tensor:
    arr = _as_array(values)
    _check_finite(arr, "constant")
    return Tensor(arr)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out`` and, if any input is tracked, record a node for it.

    ``backward_fn(g)`` returns one gradient (or None) per input.
    """
    _check_finite(out, op)
    t = Tensor(out)
    graph = None
    for x in inputs:
        if x.graph is not None:
            if graph is not None and x.graph is not graph:
                raise RuntimeError("inputs belong to different graphs")
            graph = x.graph
    if graph is None:
        return t
    parents = tuple(x.node_id for x in inputs if x.node_id is not None)
    slots = tuple(i for i, x in enumerate(inputs) if x.node_id is not None)

    def node_backward(g):
        gs = backward_fn(g)
        return tuple(gs[i] for i in slots)

    t.graph = graph
    t.node_id = graph._append(op, parents, out, node_backward)
    return t


# ---------------------------------------------------------------------------
# elementwise


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum()) if shape else np.asarray(g.sum())


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "add")
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "sub")
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "mul")
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = _wrap(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    return _record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def clamp(a, lo: float = -np.inf, hi: float = np.inf) -> Tensor:
    a = _wrap(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clamp", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "neg": neg,
    "exp": exp, "log": log, "relu": relu, "clamp": clamp,
}


def elementwise(kind: str, a, b=None, **kwargs) -> Tensor:
    """Dispatch by name: add, sub, mul, neg, exp, log, relu, clamp."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return fn(a, b)
    return fn(a, **kwargs)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _record("matmul", (a, b), a.data @ b.data,
                   lambda g: (g @ b.data.T if a.requires_grad else None,
                              a.data.T @ g if b.requires_grad else None))


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    # (n, ho, wo, c*kh*kw)
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * kh * kw), ho, wo


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int):
    n, c, h, w = shape
    cols = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d(x, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``C×H×W`` (or batched ``N×C×H×W``) input with ``F×C×kh×kw`` kernels."""
    x, kernels = _wrap(x), _wrap(kernels)
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4 or kernels.shape[1] != xd.shape[1]:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and kernels {kernels.shape}")
    f, c, kh, kw = kernels.shape
    cols, ho, wo = _im2col(xd, kh, kw, stride, padding)
    wmat = kernels.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(xd.shape[0], ho, wo, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out[0] if single else out)

    def bw(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(-1, f)
        gk = (gmat.T @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _col2im(gmat @ wmat, xd.shape, kh, kw, stride, padding, ho, wo)
            gx = gx[0] if single else gx
        return gx, gk

    return _record("conv2d", (x, kernels), out, bw)


def upsample_nearest(x, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the two trailing axes."""
    x = _wrap(x)
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def bw(g):
        s = g.shape
        g = g.reshape(s[:-2] + (s[-2] // factor, factor, s[-1] // factor, factor))
        return (g.sum(axis=(-3, -1)),)

    return _record("upsample", (x,), out, bw)


# ---------------------------------------------------------------------------
# softmax family


def softmax(logits) -> Tensor:
    x = _wrap(logits)
    if x.shape[-1] < 2:
        raise ShapeError("softmax needs at least two classes on the last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (x,), p, bw)


def log_softmax(logits) -> Tensor:
    x = _wrap(logits)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", (x,), out, bw)


# ---------------------------------------------------------------------------
# randomness


_MASK64 = (1 << 64) - 1


class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    Backed by PCG64 seeded through ``SeedSequence``, whose output is
    platform-independent.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self.reset()

    @classmethod
    def derive(cls, seed: int, purpose: str, index: int = 0) -> "RngStream":
        digest = hashlib.blake2b(f"{purpose}:{int(index)}".encode(), digest_size=8).digest()
        return cls(seed, int.from_bytes(digest, "little"))

    def reset(self) -> None:
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.stream_id])))

    def clone(self) -> "RngStream":
        other = RngStream.__new__(RngStream)
        other.seed, other.stream_id = self.seed, self.stream_id
        other._gen = np.random.Generator(np.random.PCG64())
        other._gen.bit_generator.state = self._gen.bit_generator.state
        return other

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def random(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def dropout_mask(shape: tuple, rate: float, rng) -> np.ndarray:
    """Inverted-dropout mask. ``rng`` may be one stream or one stream per leading block."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    scale = 1.0 / (1.0 - rate)
    if isinstance(rng, RngStream):
        return (rng.random(shape) >= rate) * scale
    streams = list(rng)
    if shape[0] % len(streams):
        raise ShapeError(f"cannot split leading axis {shape[0]} into {len(streams)} blocks")
    block = (shape[0] // len(streams),) + tuple(shape[1:])
    return np.concatenate([(s.random(block) >= rate) * scale for s in streams], axis=0)


def dropout_apply(a, rate: float, rng) -> Tensor:
    """Zero each element with probability ``rate`` and rescale survivors by ``1/(1-rate)``."""
    a = _wrap(a)
    mask = dropout_mask(a.shape, rate, rng)
    if rate == 0.0:
        return a
    return _record("dropout", (a,), a.data * mask, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"invalid axis {axis} for {ndim}-d tensor")
    return axis % ndim


def reduce(kind: str, a, axis: Optional[int] = None) -> Tensor:
    a = _wrap(a)
    ax = _norm_axis(axis, a.data.ndim)
    shape = a.shape
    if kind == "sum":
        out = a.data.sum(axis=ax)

        def bw(g):
            g = g if ax is None else np.expand_dims(g, ax)
            return (np.broadcast_to(g, shape).copy(),)
    elif kind == "mean":
        n = a.data.size if ax is None else shape[ax]
        out = a.data.mean(axis=ax)

        def bw(g):
            g = g if ax is None else np.expand_dims(g, ax)
            return (np.broadcast_to(g / n, shape).copy(),)
    elif kind == "max":
        if ax is None:
            idx = np.argmax(a.data)
            out = a.data.reshape(-1)[idx]

            def bw(g):
                gx = np.zeros(a.data.size)
                gx[idx] = g
                return (gx.reshape(shape),)
        else:
            # argmax returns the first maximal index, which is the tie rule we want
            idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
            out = np.take_along_axis(a.data, idx, axis=ax).squeeze(ax)

            def bw(g):
                gx = np.zeros(shape)
                np.put_along_axis(gx, idx, np.expand_dims(g, ax), axis=ax)
                return (gx,)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return _record(kind, (a,), np.asarray(out, dtype=np.float64), bw)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    inv = np.argsort(axes)
    return _record("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)),
                   lambda g: (g.transpose(inv),))


def expand(a, n: int, axis: int = 0) -> Tensor:
    """Insert a new axis of length ``n`` holding copies of ``a``."""
    a = _wrap(a)
    ax = axis % (a.data.ndim + 1)
    out = np.repeat(np.expand_dims(a.data, ax), n, axis=ax)
    return _record("expand", (a,), out, lambda g: (g.sum(axis=ax),))


def take(a, index) -> Tensor:
    """Pick one entry of the last axis per leading position: ``out[i] = a[i, index[i]]``."""
    a = _wrap(a)
    idx = np.asarray(index, dtype=np.int64)
    lead = a.shape[:-1]
    idx = np.broadcast_to(idx, lead)
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(a.shape)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _record("take", (a,), out, bw)


def bias_add(a, b, axis: int = -1) -> Tensor:
    """Add a vector ``b`` along ``axis`` of ``a`` (dense bias, or per-channel conv bias)."""
    a, b = _wrap(a), _wrap(b)
    ax = axis % a.data.ndim
    if b.data.ndim != 1 or b.shape[0] != a.shape[ax]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match axis {ax} of {a.shape}")
    view = [1] * a.data.ndim
    view[ax] = -1
    other = tuple(i for i in range(a.data.ndim) if i != ax)
    return _record("bias_add", (a, b), a.data + b.data.reshape(view),
                   lambda g: (g, g.sum(axis=other) if b.requires_grad else None))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if len({t.shape for t in ts}) != 1:
        raise ShapeError("stack needs equally shaped tensors")
    ax = axis % (ts[0].data.ndim + 1)
    out = np.stack([t.data for t in ts], axis=ax)
    n = len(ts)
    return _record("stack", tuple(ts), out,
                   lambda g: tuple(np.take(g, i, axis=ax) for i in range(n)))


# ---------------------------------------------------------------------------
# reverse pass


def backward(graph: Graph, output: Tensor) -> dict:
    """Gradients of scalar ``output`` w.r.t. every node of ``graph``.

    Unreachable nodes map to zeros. The graph is not modified, so this can be
    called repeatedly.
    """
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if output.graph is not graph:
        raise ValueError("output is not a node of this graph")
    grads: dict = {output.node_id: np.ones_like(graph.nodes[output.node_id].value)}
    for nid in range(output.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = graph.nodes[nid]
        if node.backward_fn is None:
            continue
        for pid, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    for nid, node in enumerate(graph.nodes):
        if nid not in grads:
            grads[nid] = np.zeros_like(node.value)
    return grads


def grad(output: Tensor, wrt: Tensor) -> np.ndarray:
    """Convenience: gradient of scalar ``output`` with respect to one tensor."""
    if wrt.graph is None:
        raise ValueError("wrt is not tracked by a graph")
    return backward(wrt.graph, output)[wrt.node_id]


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = _as_array(x)
    g = Graph()
    xv = g.variable(x0)
    analytic = grad(f(xv), xv).reshape(-1)
    flat = x0.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(constant(xp.reshape(x0.shape))).item()
        fm = f(constant(xm.reshape(x0.shape))).item()
        central = (fp - fm) / (2.0 * h)
        err = abs(analytic[i] - central) / (abs(analytic[i]) + abs(central) + 1e-12)
        worst = max(worst, err)
    return worst
