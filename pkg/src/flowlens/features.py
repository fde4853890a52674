"""Small differentiable CNN feature extractor ``F: image -> R^D``.

Two 3x3 conv layers (3->8->16 channels), each followed by ReLU and 2x2
average pooling (the second pool precedes the projection).  A linear
projection shared by all positions maps the 16 channels to ``k`` channels,
which are then average-pooled over a ``cells x cells`` grid.  ``levels`` is
a tuple of ``(cells, k)`` pairs, giving ``D = sum(cells**2 * k)``.  A single
``(1, D)`` level is a plain global average pool followed by a linear map;
projecting before pooling is the same map since both are linear.

Keeping the projection per cell makes every feature depend on one image
region only, so pixel gradients of a density over the features stay local.
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

MAGIC = b"FECKPT01"
PIXEL_CENTER = 0.5
_PARAM_NAMES = ("c1w", "c1b", "c2w", "c2b", "pw", "pb")


@dataclass
class FeatureExtractor:
    c1w: np.ndarray
    c1b: np.ndarray
    c2w: np.ndarray
    c2b: np.ndarray
    pw: np.ndarray
    pb: np.ndarray
    input_size: int = 32
    levels: tuple = ((2, 16),)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.levels = tuple((int(c), int(k)) for c, k in self.levels)

    @property
    def params(self):
        return [getattr(self, n) for n in _PARAM_NAMES]

    @property
    def feature_dim(self):
        return sum(c * c * k for c, k in self.levels)

    def copy(self):
        return copy.deepcopy(self)

    def zeroed(self):
        """Copy with every weight and bias set to zero."""
        fe = self.copy()
        for n in _PARAM_NAMES:
            getattr(fe, n)[...] = 0
        return fe


def default_levels(feature_dim=64, cells=2):
    if feature_dim % (cells * cells):
        raise ValueError(f"feature dimension {feature_dim} not divisible by {cells}x{cells} cells")
    return ((cells, feature_dim // (cells * cells)),)


def init_extractor(feature_dim=64, input_size=32, levels=None, seed=0) -> FeatureExtractor:
    levels = default_levels(feature_dim) if levels is None else tuple(levels)
    dim = sum(c * c * k for c, k in levels)
    if dim != feature_dim:
        raise ValueError(f"levels {levels} give {dim} features, expected {feature_dim}")
    if feature_dim % 2 or any(k % 2 for _, k in levels):
        raise ValueError(f"feature dimension and per-level channels must be even, got {levels}")
    for cells, _ in levels:
        if input_size % (4 * cells):
            raise ValueError(f"input size {input_size} not divisible by 4*{cells}")
    k = sum(k for _, k in levels)
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)

    return FeatureExtractor(
        c1w=he((3, 3, 3, 8), 27), c1b=np.full(8, 0.01, np.float32),
        c2w=he((3, 3, 8, 16), 72), c2b=np.full(16, 0.01, np.float32),
        pw=(rng.uniform(-1, 1, (k, 16)) / 4.0).astype(np.float32),
        pb=np.zeros(k, np.float32),
        input_size=input_size, levels=levels,
    )


def check_images(fe, img):
    img = np.asarray(img)
    s = fe.input_size
    if img.shape[-3:] != (s, s, 3) or img.ndim not in (3, 4):
        raise ValueError(f"expected image shape ({s}, {s}, 3), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def record_conv_stack(tape: Tape, nodes, img):
    """Record conv1/relu/pool/conv2/relu; returns (pre-pool map, pooled map)."""
    c1w, c1b, c2w, c2b = nodes[:4]
    # centered pixels: rectified responses then track local contrast, not just brightness
    img = tape.scale(img, 1.0, -PIXEL_CENTER)
    h = tape.avgpool2(tape.relu(tape.conv3x3(img, c1w, c1b)))
    m = tape.relu(tape.conv3x3(h, c2w, c2b))
    return m, tape.avgpool2(m)


def record_extract(tape: Tape, fe: FeatureExtractor, img, param_nodes=None):
    """Record ``F(img)`` for an image node of shape (H,W,3) or (N,H,W,3)."""
    if param_nodes is None:
        param_nodes = [tape.constant(p) for p in fe.params]
    _, pooled = record_conv_stack(tape, param_nodes, img)
    projected = tape.matvec(param_nodes[4], pooled, param_nodes[5])
    # each level pools its own channel slice; halves of every level are
    # interleaved so both coupling halves see every cell at every level
    firsts, seconds, start = [], [], 0
    for cells, k in fe.levels:
        mid = start + k // 2
        firsts.append(tape.gridpool(tape.slice(projected, start, mid), cells))
        seconds.append(tape.gridpool(tape.slice(projected, mid, start + k), cells))
        start += k
    if len(fe.levels) == 1:
        return tape.gridpool(projected, fe.levels[0][0])
    return tape.concat(*firsts, *seconds)


def extract(fe: FeatureExtractor, img) -> np.ndarray:
    """Feature vector(s) for one image (H,W,3) or a batch (N,H,W,3)."""
    img = check_images(fe, img)
    tape = Tape()
    out = record_extract(tape, fe, tape.constant(img))
    return tape.value(out).copy()


def conv_map(fe: FeatureExtractor, img) -> np.ndarray:
    """ReLU conv2 activations at half resolution, shape (N, H/2, W/2, 16)."""
    img = check_images(fe, img)
    tape = Tape()
    nodes = [tape.constant(p) for p in fe.params[:4]]
    m, _ = record_conv_stack(tape, nodes, tape.constant(img))
    return tape.value(m)


@dataclass
class FeatureTrainConfig:
    epochs: int = 15
    lr: float = 2e-3
    batch_size: int = 64
    seed: int = 0
    feature_dim: int = 64
    levels: tuple = ((2, 16),)


def train_features(images, labels, config: FeatureTrainConfig | None = None) -> FeatureExtractor:
    """Train the extractor on a classification proxy; the linear head is discarded."""
    config = config or FeatureTrainConfig()
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("train_features needs at least 2 classes")
    n_classes = int(labels.max()) + 1
    fe = init_extractor(config.feature_dim, images.shape[1], config.levels, config.seed)
    check_images(fe, images[:1])
    rng = np.random.default_rng([config.seed, 2])
    hw = (rng.uniform(-1, 1, (n_classes, config.feature_dim)) / math.sqrt(config.feature_dim)).astype(np.float32)
    hb = np.zeros(n_classes, np.float32)
    params = fe.params + [hw, hb]
    opt = Adam(params, lr=config.lr)
    for epoch in range(config.epochs):
        order = rng.permutation(len(images))
        total, correct = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            tape = Tape()
            nodes = [tape.leaf(p) for p in params]
            feats = record_extract(tape, fe, tape.constant(images[idx]), nodes[:6])
            logits = tape.matvec(nodes[6], tape.relu(feats), nodes[7])
            loss = tape.softmax_xent(logits, labels[idx])
            grads = tape.backward(loss)
            opt.step([grads[n] for n in nodes])
            total += float(tape.value(loss)) * len(idx)
            correct += int((tape.value(logits).argmax(axis=1) == labels[idx]).sum())
        log.debug("features epoch %d loss %.4f acc %.3f", epoch, total / len(images), correct / len(images))
    acc = training_accuracy(fe, hw, hb, images, labels) if config.epochs else None
    fe.metadata = {"epochs": config.epochs, "seed": config.seed, "train_accuracy": acc}
    return fe


def training_accuracy(fe, hw, hb, images, labels):
    feats = np.concatenate([extract(fe, images[i:i + 256]) for i in range(0, len(images), 256)])
    logits = np.maximum(feats, 0) @ hw.T + hb
    return float((logits.argmax(axis=1) == labels).mean())


def save_checkpoint(fe: FeatureExtractor) -> bytes:
    header = {
        "kind": "features",
        "feature_dim": fe.feature_dim,
        "input_size": fe.input_size,
        "levels": [list(lv) for lv in fe.levels],
        "metadata": fe.metadata,
    }
    return container.pack(MAGIC, header, {n: getattr(fe, n) for n in _PARAM_NAMES})


def load_checkpoint(data: bytes) -> FeatureExtractor:
    header, arrays = container.unpack(MAGIC, data)
    return FeatureExtractor(**arrays, input_size=header["input_size"], levels=header["levels"],
                            metadata=header["metadata"])
