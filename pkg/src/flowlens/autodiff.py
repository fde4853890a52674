"""Tape-based reverse-mode differentiation over dense numpy arrays.

Every operation is evaluated eagerly and appended to a :class:`Tape`.
Nodes are addressed by integer ids; inputs always point at earlier nodes,
so a single reverse sweep over the tape visits each node exactly once.

Batched inputs are supported by the ops that need them in practice
(``matvec``, ``conv3x3``, the pools): a leading batch axis is carried
through unchanged.  Elementwise ops require identical shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op kind."""


@dataclass
class Node:
    kind: str
    inputs: tuple
    value: np.ndarray
    saved: dict = field(default_factory=dict)
    requires_grad: bool = False
    params: dict = field(default_factory=dict)


def _shape_error(kind, *shapes):
    desc = " vs ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{kind}: incompatible shapes {desc}")


def _im2col3x3(x):
    """(N,H,W,C) -> zero-padded 3x3 patches viewed as (N,H,W,C,3,3)."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return sliding_window_view(xp, (3, 3), axis=(1, 2))


# Forward rules return (value, saved). Backward rules take (node, grad,
# input values, needs) and return one gradient (or None) per input.

def _fw_matvec(vals, params):
    w, x = vals[0], vals[1]
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise _shape_error("matvec", w.shape, x.shape)
    y = x @ w.T
    if len(vals) == 3:
        b = vals[2]
        if b.shape != (w.shape[0],):
            raise _shape_error("matvec", w.shape, b.shape)
        y = y + b
    return y, {}


def _bw_matvec(node, g, vals, needs):
    w, x = vals[0], vals[1]
    out = [None] * len(vals)
    if needs[0]:
        out[0] = g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    if needs[1]:
        out[1] = g @ w
    if len(vals) == 3 and needs[2]:
        out[2] = g.reshape(-1, g.shape[-1]).sum(axis=0)
    return out


def _fw_conv3x3(vals, params):
    x, w = vals[0], vals[1]
    if x.ndim not in (3, 4) or w.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[-1]:
        raise _shape_error("conv3x3", x.shape, w.shape)
    batched = x.ndim == 4
    xb = x if batched else x[None]
    y = np.tensordot(_im2col3x3(xb), w, axes=([3, 4, 5], [2, 0, 1]))
    if len(vals) == 3:
        b = vals[2]
        if b.shape != (w.shape[3],):
            raise _shape_error("conv3x3", w.shape, b.shape)
        y = y + b
    return (y if batched else y[0]), {}


def _bw_conv3x3(node, g, vals, needs):
    x, w = vals[0], vals[1]
    batched = x.ndim == 4
    xb = x if batched else x[None]
    gb = g if batched else g[None]
    out = [None] * len(vals)
    if needs[0]:
        wf = w[::-1, ::-1].transpose(3, 0, 1, 2)  # (O,3,3,C), spatially flipped
        gx = np.tensordot(_im2col3x3(gb), wf, axes=([3, 4, 5], [0, 1, 2]))
        out[0] = gx if batched else gx[0]
    if needs[1]:
        gw = np.tensordot(_im2col3x3(xb), gb, axes=([0, 1, 2], [0, 1, 2]))  # (C,3,3,O)
        out[1] = gw.transpose(1, 2, 0, 3)
    if len(vals) == 3 and needs[2]:
        out[2] = gb.sum(axis=(0, 1, 2))
    return out


def _same_shape(kind, vals):
    if vals[0].shape != vals[1].shape:
        raise _shape_error(kind, vals[0].shape, vals[1].shape)


def _fw_add(vals, params):
    _same_shape("add", vals)
    return vals[0] + vals[1], {}


def _bw_add(node, g, vals, needs):
    return [g, g]


def _fw_mul(vals, params):
    _same_shape("mul", vals)
    return vals[0] * vals[1], {}


def _bw_mul(node, g, vals, needs):
    return [g * vals[1] if needs[0] else None, g * vals[0] if needs[1] else None]


def _fw_exp(vals, params):
    return np.exp(vals[0]), {}


def _bw_exp(node, g, vals, needs):
    return [g * node.value]


def _fw_abs(vals, params):
    return np.abs(vals[0]), {}


def _bw_abs(node, g, vals, needs):
    return [g * np.sign(vals[0])]


def _fw_relu(vals, params):
    return np.maximum(vals[0], 0), {}


def _bw_relu(node, g, vals, needs):
    # subgradient 0 at exactly 0
    return [g * (vals[0] > 0)]


def _fw_tanh(vals, params):
    return np.tanh(vals[0]), {}


def _bw_tanh(node, g, vals, needs):
    return [g * (1 - node.value * node.value)]


def _fw_scale(vals, params):
    return vals[0] * params["mult"] + params["offset"], {}


def _bw_scale(node, g, vals, needs):
    return [g * node.params["mult"]]


def _fw_scale_shift(vals, params):
    x = vals[0]
    mult, offset = params["mult"], params["offset"]
    if mult.shape != (x.shape[-1],) or offset.shape != mult.shape:
        raise _shape_error("scale_shift", x.shape, mult.shape)
    return x * mult + offset, {}


def _bw_scale_shift(node, g, vals, needs):
    return [g * node.params["mult"]]


def _fw_avgpool2(vals, params):
    x = vals[0]
    if x.ndim not in (3, 4) or x.shape[-3] % 2 or x.shape[-2] % 2:
        raise _shape_error("avgpool2", x.shape)
    *lead, h, w, c = x.shape
    y = x.reshape(*lead, h // 2, 2, w // 2, 2, c).mean(axis=(-4, -2))
    return y, {}


def _bw_avgpool2(node, g, vals, needs):
    gx = np.repeat(np.repeat(g, 2, axis=-3), 2, axis=-2) * 0.25
    return [gx]


def _fw_gridpool(vals, params):
    x = vals[0]
    cells = params["cells"]
    if x.ndim not in (3, 4) or x.shape[-3] % cells or x.shape[-2] % cells:
        raise _shape_error("gridpool", x.shape, (cells, cells))
    *lead, h, w, c = x.shape
    y = x.reshape(*lead, cells, h // cells, cells, w // cells, c).mean(axis=(-4, -2))
    # channel-major: feature index = channel * cells**2 + cell
    y = np.moveaxis(y, -1, -3)
    return np.ascontiguousarray(y).reshape(*lead, cells * cells * c), {}


def _bw_gridpool(node, g, vals, needs):
    x = vals[0]
    cells = node.params["cells"]
    *lead, h, w, c = x.shape
    sy, sx = h // cells, w // cells
    gg = np.moveaxis(g.reshape(*lead, c, cells, cells), -3, -1)
    gg = gg.reshape(*lead, cells, 1, cells, 1, c) / (sy * sx)
    gx = np.broadcast_to(gg, (*lead, cells, sy, cells, sx, c)).reshape(x.shape)
    return [gx]


def _fw_slice(vals, params):
    x = vals[0]
    start, stop = params["start"], params["stop"]
    if not 0 <= start < stop <= x.shape[-1]:
        raise _shape_error("slice", x.shape, (start, stop))
    return x[..., start:stop], {}


def _bw_slice(node, g, vals, needs):
    gx = np.zeros_like(vals[0])
    gx[..., node.params["start"]:node.params["stop"]] = g
    return [gx]


def _fw_concat(vals, params):
    lead = vals[0].shape[:-1]
    for v in vals[1:]:
        if v.shape[:-1] != lead:
            raise _shape_error("concat", vals[0].shape, v.shape)
    return np.concatenate(vals, axis=-1), {}


def _bw_concat(node, g, vals, needs):
    out, pos = [], 0
    for v in vals:
        n = v.shape[-1]
        out.append(g[..., pos:pos + n])
        pos += n
    return out


def _fw_sum(vals, params):
    x = vals[0]
    if params["axis"] is None:
        return np.asarray(x.sum(), dtype=x.dtype).reshape(()), {}
    return x.sum(axis=-1), {}


def _bw_sum(node, g, vals, needs):
    x = vals[0]
    if node.params["axis"] is None:
        return [np.full_like(x, g)]
    return [np.broadcast_to(g[..., None], x.shape).copy()]


def _fw_softmax_xent(vals, params):
    logits = vals[0]
    labels = params["labels"]
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise _shape_error("softmax_xent", logits.shape, labels.shape)
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    loss = -logp[np.arange(len(labels)), labels].mean()
    return np.asarray(loss, dtype=logits.dtype).reshape(()), {"prob": np.exp(logp)}


def _bw_softmax_xent(node, g, vals, needs):
    labels = node.params["labels"]
    d = node.saved["prob"].copy()
    d[np.arange(len(labels)), labels] -= 1
    return [d * (g / len(labels))]


_RULES = {
    "leaf": (None, None),
    "matvec": (_fw_matvec, _bw_matvec),
    "conv3x3": (_fw_conv3x3, _bw_conv3x3),
    "add": (_fw_add, _bw_add),
    "mul": (_fw_mul, _bw_mul),
    "exp": (_fw_exp, _bw_exp),
    "abs": (_fw_abs, _bw_abs),
    "relu": (_fw_relu, _bw_relu),
    "tanh": (_fw_tanh, _bw_tanh),
    "scale": (_fw_scale, _bw_scale),
    "scale_shift": (_fw_scale_shift, _bw_scale_shift),
    "avgpool2": (_fw_avgpool2, _bw_avgpool2),
    "gridpool": (_fw_gridpool, _bw_gridpool),
    "slice": (_fw_slice, _bw_slice),
    "concat": (_fw_concat, _bw_concat),
    "sum": (_fw_sum, _bw_sum),
    "softmax_xent": (_fw_softmax_xent, _bw_softmax_xent),
}

OP_KINDS = tuple(k for k in _RULES if k != "leaf")


class Tape:
    """Append-only record of evaluated operations.

    Args:
        dtype: working precision. ``np.float32`` for normal use,
            ``np.float64`` for gradient checks.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    def leaf(self, value, requires_grad: bool = True) -> int:
        arr = np.array(value, dtype=self.dtype)
        if not 0 <= arr.ndim <= 4:
            raise ShapeError(f"leaf: rank {arr.ndim} outside 0-4")
        self.nodes.append(Node("leaf", (), arr, requires_grad=requires_grad))
        return len(self.nodes) - 1

    def constant(self, value) -> int:
        return self.leaf(value, requires_grad=False)

    def record(self, kind: str, inputs, **params) -> int:
        """Evaluate ``kind`` on the values of ``inputs`` and append the result."""
        if kind not in _RULES or kind == "leaf":
            raise ValueError(f"unknown op kind {kind!r}")
        inputs = tuple(int(i) for i in inputs)
        n = len(self.nodes)
        for i in inputs:
            if not 0 <= i < n:
                raise IndexError(f"{kind}: input node {i} not on tape")
        vals = [self.nodes[i].value for i in inputs]
        forward, _ = _RULES[kind]
        value, saved = forward(vals, params)
        value = np.asarray(value, dtype=self.dtype)
        node = Node(kind, inputs, value, saved,
                    requires_grad=any(self.nodes[i].requires_grad for i in inputs),
                    params=params)
        self.nodes.append(node)
        return n

    # convenience wrappers, one per op kind

    def matvec(self, w, x, b=None):
        return self.record("matvec", (w, x) if b is None else (w, x, b))

    def conv3x3(self, x, w, b=None):
        return self.record("conv3x3", (x, w) if b is None else (x, w, b))

    def add(self, a, b):
        return self.record("add", (a, b))

    def mul(self, a, b):
        return self.record("mul", (a, b))

    def exp(self, a):
        return self.record("exp", (a,))

    def abs(self, a):
        return self.record("abs", (a,))

    def relu(self, a):
        return self.record("relu", (a,))

    def tanh(self, a):
        return self.record("tanh", (a,))

    def scale(self, a, mult, offset=0.0):
        return self.record("scale", (a,), mult=float(mult), offset=float(offset))

    def scale_shift(self, a, mult, offset):
        mult = np.asarray(mult, dtype=self.dtype)
        offset = np.asarray(offset, dtype=self.dtype)
        return self.record("scale_shift", (a,), mult=mult, offset=offset)

    def avgpool2(self, a):
        return self.record("avgpool2", (a,))

    def gridpool(self, a, cells=1):
        return self.record("gridpool", (a,), cells=int(cells))

    def global_avgpool(self, a):
        return self.gridpool(a, 1)

    def slice(self, a, start, stop):
        return self.record("slice", (a,), start=int(start), stop=int(stop))

    def concat(self, *parts):
        return self.record("concat", parts)

    def sum(self, a, axis=None):
        if axis not in (None, -1):
            raise ValueError("sum supports axis=None or axis=-1")
        return self.record("sum", (a,), axis=axis)

    def softmax_xent(self, logits, labels):
        return self.record("softmax_xent", (logits,), labels=np.asarray(labels, dtype=np.int64))

    def backward(self, root: int) -> dict[int, np.ndarray]:
        """Gradients of the scalar ``root`` with respect to every node.

        Nodes without a path to ``root`` receive zero gradients.
        """
        rv = self.nodes[root].value
        if rv.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {rv.shape}")
        grads: list = [None] * len(self.nodes)
        grads[root] = np.ones_like(rv)
        for nid in range(root, -1, -1):
            g = grads[nid]
            node = self.nodes[nid]
            if g is None or node.kind == "leaf" or not node.requires_grad:
                continue
            needs = [self.nodes[i].requires_grad for i in node.inputs]
            vals = [self.nodes[i].value for i in node.inputs]
            _, backward = _RULES[node.kind]
            for i, gi in zip(node.inputs, backward(node, g, vals, needs)):
                if gi is None or not self.nodes[i].requires_grad:
                    continue
                gi = np.asarray(gi, dtype=self.dtype)
                if grads[i] is None:
                    grads[i] = gi
                else:
                    grads[i] = grads[i] + gi
        return {
            i: (g if g is not None else np.zeros_like(self.nodes[i].value))
            for i, g in enumerate(grads)
        }


def finite_diff_check(f, x, step=1e-3, probes=None):
    """Compare tape gradients of ``f`` against central differences.

    ``f(tape, x_node)`` must record a scalar-valued node on ``tape`` and
    return its id.  Both routes run in float64.  ``probes`` optionally limits
    the comparison to a subset of flat coordinate indices.

    Returns the max over checked coordinates of
    ``|analytic - numeric| / (|numeric| + 1e-8)``; ``inf`` if ``f`` produced NaN.
    """
    x = np.array(x, dtype=np.float64)

    def evaluate(arr):
        tape = Tape(np.float64)
        xi = tape.leaf(arr)
        root = f(tape, xi)
        return tape, xi, root

    tape, xi, root = evaluate(x)
    if not np.isfinite(tape.value(root)).all():
        return float("inf")
    analytic = tape.backward(root)[xi].reshape(-1)
    idx = np.arange(x.size) if probes is None else np.asarray(probes, dtype=np.int64)
    flat = x.reshape(-1)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        t, _, r = evaluate(x)
        fp = float(t.value(r))
        flat[i] = orig - step
        t, _, r = evaluate(x)
        fm = float(t.value(r))
        flat[i] = orig
        num = (fp - fm) / (2 * step)
        if not np.isfinite(num):
            return float("inf")
        worst = max(worst, abs(analytic[i] - num) / (abs(num) + 1e-8))
    return float(worst)


class Adam:
    """Adam with constant learning rate over a list of parameter arrays (updated in place)."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g.astype(p.dtype, copy=False)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
