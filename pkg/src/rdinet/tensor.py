"""Dense float64 tensors, a small operator set and reverse-mode differentiation.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order. A
:class:`Graph` is an immutable, topologically ordered list of operator
applications over named leaves (parameters and inputs). :func:`evaluate` runs
the forward pass for the requested nodes only; :func:`backward` computes
gradients of a scalar node with respect to any subset of the leaves.

Layout conventions: images are ``[batch, height, width, channels]``, dense
weights are ``[in, out]``, convolution kernels are ``[kh, kw, in, out]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

Tensor = np.ndarray


class GraphError(Exception):
    """Base class for graph construction and evaluation failures."""


class ShapeError(GraphError):
    def __init__(self, node: str, message: str):
        super().__init__(f"node {node!r}: {message}")
        self.node = node


class NonFiniteError(GraphError):
    def __init__(self, name: str, message: str = "non-finite values"):
        super().__init__(f"{name!r}: {message}")
        self.name = name


def as_tensor(value) -> Tensor:
    return np.ascontiguousarray(value, dtype=np.float64)


# ---------------------------------------------------------------------------
# operators
#
# Each operator has a forward ``fwd(inputs, attrs) -> (out, saved)`` and a
# vector-Jacobian product ``vjp(grad_out, inputs, out, saved, attrs, needs)``
# returning one gradient (or None) per input. ``needs[i]`` tells whether the
# gradient of input i is required at all, so weight gradients can be skipped
# when only the input gradient is wanted.


@dataclass(frozen=True)
class OpDef:
    fwd: Callable
    vjp: Callable
    arity: int | None  # None = variadic


def _require_ndim(node, x, ndim, what):
    if x.ndim != ndim:
        raise ShapeError(node, f"{what} must be {ndim}-D, got shape {list(x.shape)}")


def _dense_fwd(node, ins, attrs):
    x, w, b = ins
    _require_ndim(node, x, 2, "dense input")
    _require_ndim(node, w, 2, "dense weight")
    if x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(
            node, f"dense shapes x{list(x.shape)} w{list(w.shape)} b{list(b.shape)} do not match"
        )
    return x @ w + b, None


def _dense_vjp(g, ins, out, saved, attrs, needs):
    x, w, _ = ins
    gx = g @ w.T if needs[0] else None
    gw = x.T @ g if needs[1] else None
    gb = g.sum(axis=0) if needs[2] else None
    return gx, gw, gb


def _pad_hw(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


_CHUNK_BYTES = 1 << 21


def _chunk_len(ho, wo, k):
    # samples per im2col chunk; keeps the column buffer cache-sized
    return max(1, _CHUNK_BYTES // (8 * ho * wo * k))


def _fill_cols(buf, xp, kh, kw, stride, ho, wo):
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            buf[:, :, :, i, j, :] = xp[:, i : i + hs : stride, j : j + ws : stride, :]
    return buf.reshape(-1, kh * kw * xp.shape[3])


def _correlate(xp, wmat, kh, kw, stride, ho, wo):
    """Valid cross-correlation of padded NHWC input with a [kh*kw*C, O] matrix."""
    b, c = xp.shape[0], xp.shape[3]
    out = np.empty((b, ho, wo, wmat.shape[1]))
    n = _chunk_len(ho, wo, kh * kw * c)
    buf = np.empty((min(n, b), ho, wo, kh, kw, c))
    for s in range(0, b, n):
        xb = xp[s : s + n]
        cols = _fill_cols(buf[: xb.shape[0]], xb, kh, kw, stride, ho, wo)
        np.matmul(cols, wmat, out=out[s : s + xb.shape[0]].reshape(-1, wmat.shape[1]))
    return out


def _weight_grad(xp, g, kh, kw, stride):
    b, ho, wo, out_c = g.shape
    c = xp.shape[3]
    gw = np.zeros((kh * kw * c, out_c))
    n = _chunk_len(ho, wo, kh * kw * c)
    buf = np.empty((min(n, b), ho, wo, kh, kw, c))
    for s in range(0, b, n):
        xb = xp[s : s + n]
        cols = _fill_cols(buf[: xb.shape[0]], xb, kh, kw, stride, ho, wo)
        gw += cols.T @ g[s : s + n].reshape(-1, out_c)
    return gw


def _conv_fwd(node, ins, attrs):
    x, w, b = ins
    _require_ndim(node, x, 4, "conv2d input")
    _require_ndim(node, w, 4, "conv2d kernel")
    stride, pad = attrs["stride"], attrs["pad"]
    kh, kw, in_c, out_c = w.shape
    if x.shape[3] != in_c or b.shape != (out_c,):
        raise ShapeError(
            node, f"conv2d shapes x{list(x.shape)} w{list(w.shape)} b{list(b.shape)} do not match"
        )
    xp = _pad_hw(x, pad)
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ShapeError(node, f"kernel {kh}x{kw} larger than padded input {list(xp.shape[1:3])}")
    ho = (xp.shape[1] - kh) // stride + 1
    wo = (xp.shape[2] - kw) // stride + 1
    out = _correlate(xp, w.reshape(-1, out_c), kh, kw, stride, ho, wo)
    out += b
    return out, None


def _conv_vjp(g, ins, out, saved, attrs, needs):
    x, w, _ = ins
    stride, pad = attrs["stride"], attrs["pad"]
    kh, kw, in_c, out_c = w.shape
    gx = gw = gb = None
    if needs[1]:
        gw = _weight_grad(_pad_hw(x, pad), g, kh, kw, stride).reshape(w.shape)
    if needs[2]:
        gb = g.reshape(-1, out_c).sum(axis=0)
    if needs[0]:
        bsz, h, wd, _ = x.shape
        ho, wo = g.shape[1], g.shape[2]
        if stride != 1:
            dil = np.zeros((bsz, (ho - 1) * stride + 1, (wo - 1) * stride + 1, out_c))
            dil[:, ::stride, ::stride, :] = g
        else:
            dil = g
        # full correlation with the flipped, transposed kernel
        gp = np.pad(dil, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
        hg, wg = gp.shape[1] - kh + 1, gp.shape[2] - kw + 1
        wf = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(-1, in_c)
        gxp = _correlate(gp, wf, kh, kw, 1, hg, wg)
        hp, wp = h + 2 * pad, wd + 2 * pad
        if (hg, wg) != (hp, wp) or pad:
            # trailing rows never covered by a strided window get zero
            full = np.zeros((bsz, hp, wp, in_c))
            full[:, :hg, :wg] = gxp
            gxp = full[:, pad : pad + h, pad : pad + wd]
        gx = np.ascontiguousarray(gxp)
    return gx, gw, gb


def _maxpool_fwd(node, ins, attrs):
    (x,) = ins
    _require_ndim(node, x, 4, "max_pool input")
    k = attrs["size"]
    ho, wo = x.shape[1] // k, x.shape[2] // k
    if ho == 0 or wo == 0:
        raise ShapeError(node, f"pool size {k} larger than input {list(x.shape[1:3])}")
    out = None
    for i in range(k):
        for j in range(k):
            s = x[:, i : ho * k : k, j : wo * k : k, :]
            out = s.copy() if out is None else np.maximum(out, s)
    return out, None


def _maxpool_vjp(g, ins, out, saved, attrs, needs):
    (x,) = ins
    k = attrs["size"]
    ho, wo = out.shape[1], out.shape[2]
    gx = np.zeros_like(x)
    free = np.ones(out.shape, dtype=bool)
    # gradient goes to the first maximal tap in raster order
    for i in range(k):
        for j in range(k):
            hit = free & (x[:, i : ho * k : k, j : wo * k : k, :] == out)
            gx[:, i : ho * k : k, j : wo * k : k, :] = g * hit
            free &= ~hit
    return (gx,)


def _relu_fwd(node, ins, attrs):
    return np.maximum(ins[0], 0.0), None


def _relu_vjp(g, ins, out, saved, attrs, needs):
    # subgradient 0 at 0
    return (g * (ins[0] > 0),)


def _flatten_fwd(node, ins, attrs):
    x = ins[0]
    if x.ndim < 2:
        raise ShapeError(node, "flatten needs a batch dimension")
    return x.reshape(x.shape[0], -1), None


def _flatten_vjp(g, ins, out, saved, attrs, needs):
    return (g.reshape(ins[0].shape),)


def _gap_fwd(node, ins, attrs):
    _require_ndim(node, ins[0], 4, "global_avg_pool input")
    return ins[0].mean(axis=(1, 2)), None


def _gap_vjp(g, ins, out, saved, attrs, needs):
    x = ins[0]
    hw = x.shape[1] * x.shape[2]
    return (np.broadcast_to((g / hw)[:, None, None, :], x.shape).copy(),)


def _add_fwd(node, ins, attrs):
    shape = ins[0].shape
    for t in ins[1:]:
        if t.shape != shape:
            raise ShapeError(node, f"add operands {list(shape)} vs {list(t.shape)}")
    out = ins[0].copy()
    for t in ins[1:]:
        out += t
    return out, None


def _add_vjp(g, ins, out, saved, attrs, needs):
    return tuple(g if n else None for n in needs)


def _mul_fwd(node, ins, attrs):
    a, b = ins
    if a.shape != b.shape:
        raise ShapeError(node, f"mul operands {list(a.shape)} vs {list(b.shape)}")
    return a * b, None


def _mul_vjp(g, ins, out, saved, attrs, needs):
    a, b = ins
    return (g * b if needs[0] else None, g * a if needs[1] else None)


def _scale_fwd(node, ins, attrs):
    return ins[0] * attrs["factor"], None


def _scale_vjp(g, ins, out, saved, attrs, needs):
    return (g * attrs["factor"],)


def _sum_fwd(node, ins, attrs):
    return np.asarray(ins[0].sum()), None


def _sum_vjp(g, ins, out, saved, attrs, needs):
    return (np.full(ins[0].shape, float(g)),)


def _mean_fwd(node, ins, attrs):
    return np.asarray(ins[0].mean()), None


def _mean_vjp(g, ins, out, saved, attrs, needs):
    return (np.full(ins[0].shape, float(g) / ins[0].size),)


def _softmax(z):
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_fwd(node, ins, attrs):
    _require_ndim(node, ins[0], 2, "softmax input")
    return _softmax(ins[0]), None


def _softmax_vjp(g, ins, p, saved, attrs, needs):
    return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)


def _labels_index(node, z, y):
    if y.shape != (z.shape[0],):
        raise ShapeError(node, f"labels shape {list(y.shape)} does not match logits {list(z.shape)}")
    idx = y.astype(np.int64)
    if np.any(idx != y) or np.any(idx < 0) or np.any(idx >= z.shape[1]):
        raise ShapeError(node, "labels must be integers in [0, num_classes)")
    return idx


def _xent_fwd(node, ins, attrs):
    z, y = ins
    _require_ndim(node, z, 2, "softmax_xent logits")
    idx = _labels_index(node, z, y)
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    return lse - shifted[rows, idx], idx


def _xent_vjp(g, ins, out, idx, attrs, needs):
    z, _ = ins
    p = _softmax(z)
    p[np.arange(z.shape[0]), idx] -= 1.0
    return (p * g[:, None], None)


OPS: dict[str, OpDef] = {
    "dense": OpDef(_dense_fwd, _dense_vjp, 3),
    "conv2d": OpDef(_conv_fwd, _conv_vjp, 3),
    "max_pool": OpDef(_maxpool_fwd, _maxpool_vjp, 1),
    "relu": OpDef(_relu_fwd, _relu_vjp, 1),
    "flatten": OpDef(_flatten_fwd, _flatten_vjp, 1),
    "global_avg_pool": OpDef(_gap_fwd, _gap_vjp, 1),
    "add": OpDef(_add_fwd, _add_vjp, None),
    "mul": OpDef(_mul_fwd, _mul_vjp, 2),
    "scale": OpDef(_scale_fwd, _scale_vjp, 1),
    "sum": OpDef(_sum_fwd, _sum_vjp, 1),
    "mean": OpDef(_mean_fwd, _mean_vjp, 1),
    "softmax": OpDef(_softmax_fwd, _softmax_vjp, 1),
    # per-sample loss vector; labels are not differentiated
    "softmax_xent": OpDef(_xent_fwd, _xent_vjp, 2),
}


# ---------------------------------------------------------------------------
# graph


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: tuple[str, ...]
    attrs: Mapping = field(default_factory=dict)


class Graph:
    """Immutable DAG of operator applications over named leaves.

    Build one with :class:`GraphBuilder`. ``parameters`` are trainable leaves,
    ``inputs`` are data leaves (images, labels, fusion weights).
    """

    def __init__(self, nodes: Sequence[Node], parameters: Sequence[str], inputs: Sequence[str]):
        self.nodes: tuple[Node, ...] = tuple(nodes)
        self.parameters: tuple[str, ...] = tuple(parameters)
        self.inputs: tuple[str, ...] = tuple(inputs)
        self._by_name = {n.name: n for n in self.nodes}
        self._order = {n.name: i for i, n in enumerate(self.nodes)}
        leaves = set(self.parameters) | set(self.inputs)
        if len(leaves) != len(self.parameters) + len(self.inputs):
            raise GraphError("duplicate leaf name")
        seen = set(leaves)
        for n in self.nodes:
            if n.name in seen:
                raise GraphError(f"duplicate name {n.name!r}")
            if n.op not in OPS:
                raise GraphError(f"node {n.name!r}: unknown op {n.op!r}")
            arity = OPS[n.op].arity
            if arity is not None and len(n.inputs) != arity:
                raise GraphError(f"node {n.name!r}: {n.op} takes {arity} inputs")
            for i in n.inputs:
                if i not in seen:
                    raise GraphError(f"node {n.name!r}: input {i!r} not defined before use")
            seen.add(n.name)

    @property
    def leaves(self) -> tuple[str, ...]:
        return self.parameters + self.inputs

    def node(self, name: str) -> Node:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name or name in self.leaves

    def ancestors(self, names: Iterable[str]) -> set[str]:
        """All nodes and leaves the given names depend on (inclusive)."""
        out: set[str] = set()
        stack = list(names)
        while stack:
            n = stack.pop()
            if n in out:
                continue
            out.add(n)
            if n in self._by_name:
                stack.extend(self._by_name[n].inputs)
        return out

    def extend(self, nodes: Sequence[Node] = (), inputs: Sequence[str] = ()) -> "Graph":
        """New graph with extra input leaves and nodes appended."""
        return Graph(self.nodes + tuple(nodes), self.parameters, self.inputs + tuple(inputs))


class GraphBuilder:
    """Incremental construction helper; ``build()`` freezes the result."""

    def __init__(self, base: Graph | None = None):
        self.nodes: list[Node] = list(base.nodes) if base else []
        self.parameters: list[str] = list(base.parameters) if base else []
        self.inputs: list[str] = list(base.inputs) if base else []

    def parameter(self, name: str) -> str:
        self.parameters.append(name)
        return name

    def input(self, name: str) -> str:
        self.inputs.append(name)
        return name

    def op(self, name: str, op: str, *inputs: str, **attrs) -> str:
        self.nodes.append(Node(name, op, tuple(inputs), dict(attrs)))
        return name

    def build(self) -> Graph:
        return Graph(self.nodes, self.parameters, self.inputs)


# ---------------------------------------------------------------------------
# evaluation


def _check_finite(name, t):
    if not np.all(np.isfinite(t)):
        raise NonFiniteError(name)


def _forward(graph: Graph, bindings: Mapping[str, Tensor], outputs, cache):
    needed = graph.ancestors(outputs)
    values: dict[str, Tensor] = {} if cache is None else cache
    saved: dict[str, object] = {}
    for leaf in graph.leaves:
        if leaf in needed and leaf not in values:
            if leaf not in bindings:
                raise GraphError(f"leaf {leaf!r} is not bound")
            t = bindings[leaf]
            if not isinstance(t, np.ndarray) or t.dtype != np.float64:
                t = as_tensor(t)
            _check_finite(leaf, t)
            values[leaf] = t
    for n in graph.nodes:
        if n.name not in needed or n.name in values:
            continue
        ins = [values[i] for i in n.inputs]
        out, s = OPS[n.op].fwd(n.name, ins, n.attrs)
        values[n.name] = out
        saved[n.name] = s
    return values, saved


def evaluate(
    graph: Graph,
    bindings: Mapping[str, Tensor],
    outputs: Sequence[str] | None = None,
    cache: dict[str, Tensor] | None = None,
) -> dict[str, Tensor]:
    """Forward pass computing only what ``outputs`` need.

    ``cache`` (optional) is a dict of already-computed values; it is read and
    filled in place, which lets callers evaluate a graph lazily prefix by
    prefix without recomputing shared layers.
    """
    if outputs is None:
        outputs = [graph.nodes[-1].name]
    for o in outputs:
        if o not in graph:
            raise GraphError(f"unknown output {o!r}")
    values, _ = _forward(graph, bindings, outputs, cache)
    return {o: values[o] for o in outputs}


def value_and_grad(
    graph: Graph,
    loss_node: str,
    bindings: Mapping[str, Tensor],
    wrt: Iterable[str] | None = None,
    extra_outputs: Sequence[str] = (),
) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    """Forward values (loss plus ``extra_outputs``) and gradients of the loss.

    ``wrt`` defaults to every leaf of the graph and may also name the loss
    node itself (gradient 1). Leaves the loss does not depend on get a zero
    gradient.
    """
    wrt = list(graph.leaves if wrt is None else wrt)
    for w in wrt:
        if w not in graph.leaves and w != loss_node:
            raise GraphError(f"{w!r} is not a leaf")
    values, saved = _forward(graph, bindings, [loss_node, *extra_outputs], None)
    loss = values[loss_node]
    if loss.size != 1 or loss.ndim > 1:
        raise GraphError(f"loss node {loss_node!r} is not scalar (shape {list(loss.shape)})")

    ancestors = graph.ancestors([loss_node])
    # nodes on some path from a requested leaf to the loss
    live = {w for w in wrt if w in ancestors}
    for n in graph.nodes:
        if n.name in ancestors and any(i in live for i in n.inputs):
            live.add(n.name)

    grads: dict[str, Tensor] = {loss_node: np.ones_like(loss)}
    if loss_node in live or loss_node in wrt:
        for n in reversed(graph.nodes):
            if n.name not in live or n.name not in grads:
                continue
            g = grads.pop(n.name) if n.name != loss_node else grads[n.name]
            needs = [i in live for i in n.inputs]
            parts = OPS[n.op].vjp(g, [values[i] for i in n.inputs], values[n.name], saved[n.name], n.attrs, needs)
            for i, gi in zip(n.inputs, parts):
                if gi is None or i not in live:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
    result = {}
    for w in wrt:
        if w == loss_node:
            result[w] = np.ones_like(loss)
            continue
        gw = grads.get(w)
        if gw is None:
            gw = np.zeros_like(values[w]) if w in values else np.zeros_like(as_tensor(bindings[w]))
        _check_finite(f"grad {w}", gw)
        result[w] = gw
    return {k: values[k] for k in (loss_node, *extra_outputs)}, result


def backward(
    graph: Graph,
    loss_node: str,
    bindings: Mapping[str, Tensor],
    wrt: Iterable[str] | None = None,
) -> dict[str, Tensor]:
    """Gradient map ``leaf -> d loss / d leaf`` for a scalar loss node."""
    _, grads = value_and_grad(graph, loss_node, bindings, wrt)
    return grads


def grad_check(
    graph: Graph,
    loss_node: str,
    leaf: str,
    bindings: Mapping[str, Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between backward and central finite differences.

    Relative error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    analytic = backward(graph, loss_node, bindings, wrt=[leaf])[leaf]
    base = {k: as_tensor(v) for k, v in bindings.items()}
    x = base[leaf].copy()
    flat = x.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(evaluate(graph, {**base, leaf: x}, [loss_node])[loss_node])
        flat[i] = orig - h
        down = float(evaluate(graph, {**base, leaf: x}, [loss_node])[loss_node])
        flat[i] = orig
        numeric[i] = (up - down) / (2 * h)
    a = analytic.reshape(-1)
    err = np.abs(a - numeric) / np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax (numerically stable), usable outside a graph."""
    return _softmax(as_tensor(logits))
