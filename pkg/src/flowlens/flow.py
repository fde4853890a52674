"""Affine-coupling normalizing flow with an exact log-density.

The transform ``T`` is a fixed per-dimension standardization followed by
``n_layers`` affine coupling layers on alternating halves.  Each coupling
layer maps the transformed half ``x1`` to ``exp(s) * x1 + t`` where ``s``
and ``t`` are predicted from the passive half by a shared two-layer ReLU
trunk and two linear heads.  Scale logits are soft-clamped to ``[-2, 2]``
with ``2 * tanh(raw / 2)``.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from .autodiff import Adam, Tape

log = logging.getLogger(__name__)

MAGIC = b"NFCKPT01"
LOG_2PI = math.log(2 * math.pi)
SCALE_BOUND = 2.0

_PARAM_NAMES = ("w1", "b1", "w2", "b2", "ws", "bs", "wt", "bt")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``last_good`` holds the most recent finite model."""

    def __init__(self, msg, last_good):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class CouplingLayer:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ws: np.ndarray
    bs: np.ndarray
    wt: np.ndarray
    bt: np.ndarray
    parity: int = 0

    @property
    def params(self):
        return [getattr(self, n) for n in _PARAM_NAMES]

    @property
    def half(self):
        return self.w1.shape[1]

    @classmethod
    def init(cls, dim, hidden, parity, rng):
        if dim % 2:
            raise ValueError(f"feature dimension must be even, got {dim}")
        half = dim // 2

        def uniform(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(np.float32)

        zeros = lambda *s: np.zeros(s, dtype=np.float32)  # noqa: E731
        return cls(
            w1=uniform((hidden, half), half), b1=uniform((hidden,), half),
            w2=uniform((hidden, hidden), hidden), b2=uniform((hidden,), hidden),
            ws=zeros(half, hidden), bs=zeros(half),
            wt=zeros(half, hidden), bt=zeros(half),
            parity=parity,
        )

    def conditioner(self, passive):
        """Numpy evaluation of (scale logits, shift) from the passive half."""
        h = np.maximum(passive @ self.w1.T + self.b1, 0)
        h = np.maximum(h @ self.w2.T + self.b2, 0)
        s = SCALE_BOUND * np.tanh((h @ self.ws.T + self.bs) / SCALE_BOUND)
        return s, h @ self.wt.T + self.bt


@dataclass
class FlowModel:
    layers: list
    mean: np.ndarray
    std: np.ndarray
    hidden: int = 64
    metadata: dict = field(default_factory=dict)

    @property
    def feature_dim(self):
        return len(self.mean)

    def copy(self):
        return copy.deepcopy(self)


def init_flow(dim, n_layers=10, hidden=64, seed=0, mean=None, std=None):
    """Identity-initialized flow (every coupling layer starts as the identity)."""
    rng = np.random.default_rng(seed)
    layers = [CouplingLayer.init(dim, hidden, i % 2, rng) for i in range(n_layers)]
    mean = np.zeros(dim) if mean is None else np.asarray(mean, dtype=np.float64)
    std = np.ones(dim) if std is None else np.asarray(std, dtype=np.float64)
    return FlowModel(layers, mean, std, hidden)


def _split(x, parity, half):
    """Return (active, passive) halves of ``x`` for ``parity``."""
    if parity == 0:
        return x[..., :half], x[..., half:]
    return x[..., half:], x[..., :half]


def _join(active, passive, parity):
    return np.concatenate([active, passive] if parity == 0 else [passive, active], axis=-1)


def coupling_forward(layer: CouplingLayer, x):
    """Apply one coupling layer; returns ``(y, logdet)``."""
    x = np.asarray(x, dtype=np.float64)
    x1, x2 = _split(x, layer.parity, layer.half)
    s, t = layer.conditioner(x2)
    return _join(np.exp(s) * x1 + t, x2, layer.parity), s.sum(axis=-1)


def coupling_inverse(layer: CouplingLayer, y):
    y = np.asarray(y, dtype=np.float64)
    y1, y2 = _split(y, layer.parity, layer.half)
    s, t = layer.conditioner(y2)
    return _join((y1 - t) * np.exp(-s), y2, layer.parity)


def flow_forward(model: FlowModel, x):
    """``u = T(x)`` and ``log|det J_T(x)|`` (standardization included)."""
    x = np.asarray(x, dtype=np.float64)
    u = (x - model.mean) / model.std
    logdet = np.full(x.shape[:-1], -np.log(model.std).sum())
    for layer in model.layers:
        u, ld = coupling_forward(layer, u)
        logdet = logdet + ld
    return u, logdet


def flow_inverse(model: FlowModel, u):
    x = np.asarray(u, dtype=np.float64)
    for layer in reversed(model.layers):
        x = coupling_inverse(layer, x)
    return x * model.std + model.mean


def log_density(model: FlowModel, x):
    """``log p_u(T(x)) + log|det J_T(x)|`` with a unit-Gaussian base."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.feature_dim:
        raise ValueError(f"expected feature dim {model.feature_dim}, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("log_density: non-finite input")
    u, logdet = flow_forward(model, x)
    return -0.5 * model.feature_dim * LOG_2PI - 0.5 * (u * u).sum(axis=-1) + logdet


def sample(model: FlowModel, n, seed=0):
    """Draw ``n`` samples by inverting base draws (test utility)."""
    u = np.random.default_rng(seed).standard_normal((n, model.feature_dim))
    return flow_inverse(model, u)


# tape recording

def record_coupling(tape: Tape, nodes, x, parity, half, dim):
    """Record one coupling layer on ``tape``; ``nodes`` are the 8 parameter node ids."""
    w1, b1, w2, b2, ws, bs, wt, bt = nodes
    if parity == 0:
        x1, x2 = tape.slice(x, 0, half), tape.slice(x, half, dim)
    else:
        x1, x2 = tape.slice(x, half, dim), tape.slice(x, 0, half)
    h = tape.relu(tape.matvec(w1, x2, b1))
    h = tape.relu(tape.matvec(w2, h, b2))
    s = tape.scale(tape.tanh(tape.scale(tape.matvec(ws, h, bs), 1 / SCALE_BOUND)), SCALE_BOUND)
    y1 = tape.add(tape.mul(tape.exp(s), x1), tape.matvec(wt, h, bt))
    y = tape.concat(y1, x2) if parity == 0 else tape.concat(x2, y1)
    return y, tape.sum(s, axis=-1)


def record_log_density(tape: Tape, model: FlowModel, x, param_nodes=None):
    """Record per-sample log-density of feature node ``x`` (shape (..., D)).

    ``param_nodes`` supplies per-layer parameter node ids (for training);
    otherwise weights are recorded as constants.
    """
    dim = model.feature_dim
    if param_nodes is None:
        param_nodes = [[tape.constant(p) for p in layer.params] for layer in model.layers]
    z = tape.scale_shift(x, 1.0 / model.std, -model.mean / model.std)
    logdet = None
    for layer, nodes in zip(model.layers, param_nodes):
        z, ld = record_coupling(tape, nodes, z, layer.parity, layer.half, dim)
        logdet = ld if logdet is None else tape.add(logdet, ld)
    const = -0.5 * dim * LOG_2PI - float(np.log(model.std).sum())
    quad = tape.scale(tape.sum(tape.mul(z, z), axis=-1), -0.5, const)
    return quad if logdet is None else tape.add(quad, logdet)


@dataclass
class FlowTrainConfig:
    epochs: int = 200
    lr: float = 1e-4
    batch_size: int = 128
    hidden: int = 64
    n_layers: int = 10
    seed: int = 0
    standardize: bool = True


def _mean_nll(model, data, batch=1024):
    return float(-np.mean(log_density(model, data)))


def train_flow(dataset, config: FlowTrainConfig | None = None) -> FlowModel:
    """Maximum-likelihood training with Adam at a constant learning rate."""
    config = config or FlowTrainConfig()
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("dataset must be a non-empty (N, D) array")
    dim = data.shape[1]
    if config.standardize:
        mean, std = data.mean(axis=0), np.maximum(data.std(axis=0), 1e-6)
    else:
        mean, std = np.zeros(dim), np.ones(dim)
    model = init_flow(dim, config.n_layers, config.hidden, config.seed, mean, std)
    rng = np.random.default_rng([config.seed, 1])
    params = [p for layer in model.layers for p in layer.params]
    opt = Adam(params, lr=config.lr)
    data32 = data.astype(np.float32)
    curve = []
    last_good = model.copy()
    for epoch in range(config.epochs):
        order = rng.permutation(len(data32))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = data32[order[start:start + config.batch_size]]
            tape = Tape()
            nodes = [[tape.leaf(p) for p in layer.params] for layer in model.layers]
            logp = record_log_density(tape, model, tape.constant(batch), nodes)
            loss = tape.scale(tape.sum(logp), -1.0 / len(batch))
            lv = float(tape.value(loss))
            if not math.isfinite(lv):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good)
            grads = tape.backward(loss)
            opt.step([grads[n] for layer_nodes in nodes for n in layer_nodes])
            total += lv * len(batch)
        curve.append(total / len(data32))
        last_good = model.copy()
        log.debug("epoch %d nll %.4f", epoch, curve[-1])
    model.metadata = {
        "epochs": config.epochs,
        "seed": config.seed,
        "lr": config.lr,
        "batch_size": config.batch_size,
        "final_loss": curve[-1] if curve else _mean_nll(model, data),
        "loss_curve": curve,
    }
    return model


# persistence

def save_checkpoint(model: FlowModel) -> bytes:
    header = {
        "kind": "flow",
        "feature_dim": model.feature_dim,
        "layer_count": len(model.layers),
        "hidden": model.hidden,
        "mean": [float(v) for v in model.mean],
        "std": [float(v) for v in model.std],
        "metadata": model.metadata,
    }
    arrays = {}
    for i, layer in enumerate(model.layers):
        for name in _PARAM_NAMES:
            arrays[f"{i}.{name}"] = getattr(layer, name)
    return container.pack(MAGIC, header, arrays)


def load_checkpoint(data: bytes) -> FlowModel:
    header, arrays = container.unpack(MAGIC, data)
    layers = []
    for i in range(header["layer_count"]):
        kw = {name: arrays[f"{i}.{name}"] for name in _PARAM_NAMES}
        layers.append(CouplingLayer(**kw, parity=i % 2))
    return FlowModel(
        layers,
        np.array(header["mean"], dtype=np.float64),
        np.array(header["std"], dtype=np.float64),
        header["hidden"],
        header["metadata"],
    )
