"""Toy sliding-window detector and IoU-based correctness evaluation.

Windows of 8, 12 and 16 pixels at stride 4 are scored by a small softmax
head over pooled activations of the feature extractor's conv stack (the
head is retrained for windows; the conv weights are shared and frozen).
Overlapping hits are pruned with greedy non-maximum suppression.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from . import features as feat
from .autodiff import Adam, Tape
from .boxes import DetectionBox, box_mask, iou

log = logging.getLogger(__name__)

MAGIC = b"DTCKPT01"
WINDOW_SIZES = (8, 12, 16)
STRIDE = 4
NMS_IOU = 0.5
MATCH_IOU = 0.5


def window_grid(image_size, sizes=WINDOW_SIZES, stride=STRIDE):
    """All (x, y, s) windows fully inside an ``image_size`` square image."""
    out = []
    for s in sizes:
        for y in range(0, image_size - s + 1, stride):
            for x in range(0, image_size - s + 1, stride):
                out.append((x, y, s))
    return np.array(out, dtype=np.int64)


def _rect_means(integral, x0, y0, x1, y1):
    """Mean over cell rectangles [x0,x1) x [y0,y1) for every image; -> (N, n_win, C)."""
    s = (integral[:, y1, x1] - integral[:, y0, x1] - integral[:, y1, x0] + integral[:, y0, x0])
    area = ((x1 - x0) * (y1 - y0))[None, :, None]
    return s / area


def window_descriptors(cmap, windows, cell=2):
    """Per-window descriptors from conv maps (N, h, w, C) at ``cell`` pixels per cell.

    Descriptor: inside mean, inside-minus-surround mean (surround = 1-cell ring).
    """
    n, h, w, c = cmap.shape
    integral = np.zeros((n, h + 1, w + 1, c), dtype=np.float64)
    integral[:, 1:, 1:] = cmap.cumsum(axis=1).cumsum(axis=2)
    x0 = windows[:, 0] // cell
    y0 = windows[:, 1] // cell
    x1 = (windows[:, 0] + windows[:, 2]) // cell
    y1 = (windows[:, 1] + windows[:, 2]) // cell
    inner = _rect_means(integral, x0, y0, x1, y1)
    ox0, oy0 = np.maximum(x0 - 1, 0), np.maximum(y0 - 1, 0)
    ox1, oy1 = np.minimum(x1 + 1, w), np.minimum(y1 + 1, h)
    outer_area = ((ox1 - ox0) * (oy1 - oy0))[None, :, None]
    inner_area = ((x1 - x0) * (y1 - y0))[None, :, None]
    outer_sum = _rect_means(integral, ox0, oy0, ox1, oy1) * outer_area
    ring = (outer_sum - inner * inner_area) / np.maximum(outer_area - inner_area, 1)
    return np.concatenate([inner, inner - ring], axis=-1).astype(np.float32)


@dataclass
class Detector:
    fe: feat.FeatureExtractor
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    score_threshold: float = 0.5
    metadata: dict = field(default_factory=dict)

    @property
    def n_classes(self):
        return self.w2.shape[0] - 1

    @property
    def image_size(self):
        return self.fe.input_size

    def copy(self):
        return copy.deepcopy(self)

    def logits(self, desc):
        h = np.maximum(desc @ self.w1.T + self.b1, 0)
        return h @ self.w2.T + self.b2


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def nms(boxes, iou_threshold=NMS_IOU):
    """Greedy class-agnostic suppression in descending confidence order."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].confidence, i))
    kept = []
    for i in order:
        if all(iou(boxes[i], boxes[k]) < iou_threshold for k in kept):
            kept.append(i)
    return [boxes[i] for i in kept]


def detect_batch(det: Detector, images):
    """Detections for a batch (N,H,W,3); returns one list of boxes per image."""
    images = feat.check_images(det.fe, np.asarray(images, dtype=np.float32))
    if images.ndim == 3:
        images = images[None]
    windows = window_grid(det.image_size)
    desc = window_descriptors(feat.conv_map(det.fe, images), windows)
    probs = _softmax(det.logits(desc))  # (N, n_win, K+1); last column is background
    cls = probs[..., :-1].argmax(axis=-1)
    conf = np.take_along_axis(probs, cls[..., None], axis=-1)[..., 0]
    results = []
    for i in range(len(images)):
        hits = np.nonzero(conf[i] >= det.score_threshold)[0]
        cand = [DetectionBox(float(windows[j, 0]), float(windows[j, 1]), float(windows[j, 2]),
                             float(windows[j, 2]), int(cls[i, j]), float(conf[i, j])) for j in hits]
        results.append(nms(cand))
    return results


def detect(det: Detector, img):
    return detect_batch(det, np.asarray(img)[None])[0]


def window_labels(windows, truths, pos_iou=0.6, neg_iou=0.5, n_classes=4):
    """Training label per window: class id, ``n_classes`` for background, -1 to ignore."""
    labels = np.full(len(windows), n_classes, dtype=np.int64)
    best = np.zeros(len(windows))
    for t in truths:
        for j, (x, y, s) in enumerate(windows):
            v = iou(DetectionBox(x, y, s, s), t)
            if v > best[j]:
                best[j] = v
                if v >= pos_iou:
                    labels[j] = t.label
    labels[(best >= neg_iou) & (best < pos_iou)] = -1
    return labels


@dataclass
class DetectorTrainConfig:
    epochs: int = 60
    lr: float = 3e-3
    hidden: int = 32
    batch_size: int = 512
    neg_per_pos: float = 6.0
    seed: int = 0


def train_detector(fe, images, truths, n_classes, config: DetectorTrainConfig | None = None) -> Detector:
    """Fit the window head on frozen conv features of ``images`` with box ``truths``."""
    config = config or DetectorTrainConfig()
    windows = window_grid(fe.input_size)
    descs, labels = [], []
    for start in range(0, len(images), 128):
        chunk = np.asarray(images[start:start + 128], dtype=np.float32)
        descs.append(window_descriptors(feat.conv_map(fe, chunk), windows).reshape(-1, 32))
        for tb in truths[start:start + 128]:
            labels.append(window_labels(windows, tb, n_classes=n_classes))
    X = np.concatenate(descs)
    y = np.concatenate(labels)
    keep = y >= 0
    X, y = X[keep], y[keep]
    rng = np.random.default_rng([config.seed, 3])
    pos = np.nonzero(y < n_classes)[0]
    neg = np.nonzero(y == n_classes)[0]
    n_neg = min(len(neg), int(config.neg_per_pos * max(len(pos), 1)))
    neg = rng.choice(neg, n_neg, replace=False) if n_neg < len(neg) else neg
    idx = np.sort(np.concatenate([pos, neg]))
    X, y = X[idx], y[idx]
    mu, sd = X.mean(axis=0), X.std(axis=0) + 1e-6
    d = X.shape[1]
    w1 = (rng.uniform(-1, 1, (config.hidden, d)) / math.sqrt(d)).astype(np.float32)
    b1 = np.zeros(config.hidden, np.float32)
    w2 = (rng.uniform(-1, 1, (n_classes + 1, config.hidden)) / math.sqrt(config.hidden)).astype(np.float32)
    b2 = np.zeros(n_classes + 1, np.float32)
    params = [w1, b1, w2, b2]
    opt = Adam(params, lr=config.lr)
    Xs = ((X - mu) / sd).astype(np.float32)
    for epoch in range(config.epochs):
        order = rng.permutation(len(Xs))
        for start in range(0, len(order), config.batch_size):
            bi = order[start:start + config.batch_size]
            tape = Tape()
            nodes = [tape.leaf(p) for p in params]
            hdn = tape.relu(tape.matvec(nodes[0], tape.constant(Xs[bi]), nodes[1]))
            loss = tape.softmax_xent(tape.matvec(nodes[2], hdn, nodes[3]), y[bi])
            grads = tape.backward(loss)
            opt.step([grads[n] for n in nodes])
    # fold input standardization into the first layer
    w1f = (w1 / sd[None, :]).astype(np.float32)
    b1f = (b1 - (w1 * (mu / sd)[None, :]).sum(axis=1)).astype(np.float32)
    det = Detector(fe, w1f, b1f, w2, b2)
    train_acc = float((det.logits(X).argmax(axis=1) == y).mean())
    det.metadata = {"epochs": config.epochs, "seed": config.seed, "train_accuracy": train_acc,
                    "n_windows": int(len(y))}
    return det


# evaluation

@dataclass
class MatchReport:
    correct: list
    incorrect: list
    false_positives: list
    missed: list


def match(preds, truths, iou_threshold=MATCH_IOU) -> MatchReport:
    """Greedy confidence-ordered matching; a prediction is correct iff it overlaps an
    unconsumed same-label truth with IoU >= ``iou_threshold``."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    used = [False] * len(truths)
    correct, fps = [], []
    for i in order:
        p = preds[i]
        best, best_j = -1.0, -1
        for j, t in enumerate(truths):
            if used[j] or t.label != p.label:
                continue
            v = iou(p, t)
            if v >= iou_threshold and v > best:
                best, best_j = v, j
        if best_j >= 0:
            used[best_j] = True
            correct.append(p)
        else:
            fps.append(p)
    missed = [t for j, t in enumerate(truths) if not used[j]]
    return MatchReport(correct, fps + missed, fps, missed)


def box_mean(values, box):
    mask = box_mask(box, *values.shape)
    return float(values[mask].mean()) if mask.any() else None


@dataclass
class CorrelationResult:
    mean_correct: float | None
    mean_incorrect: float | None
    rows: list

    @property
    def ratio(self):
        if self.mean_correct is None or self.mean_incorrect is None or self.mean_incorrect == 0:
            return None
        return self.mean_correct / self.mean_incorrect


def correlation_experiment(maps, detections, truths, image_ids=None) -> CorrelationResult:
    """Mean gradient inside correct vs incorrect boxes over a set of images.

    ``maps`` are gradient-map arrays (H, W); ``detections`` and ``truths`` are
    per-image box lists.  Empty groups report ``None`` rather than 0.
    """
    rows, corr, inc = [], [], []
    for k, (m, preds, tb) in enumerate(zip(maps, detections, truths)):
        rep = match(preds, tb)
        iid = image_ids[k] if image_ids is not None else k
        for flag, group in ((True, rep.correct), (False, rep.incorrect)):
            for b in group:
                v = box_mean(m, b)
                if v is None:
                    continue
                (corr if flag else inc).append(v)
                rows.append((iid, b, flag, v))
    mc = float(np.mean(corr)) if corr else None
    mi = float(np.mean(inc)) if inc else None
    return CorrelationResult(mc, mi, rows)


def save_checkpoint(det: Detector) -> bytes:
    header = {
        "kind": "detector",
        "score_threshold": det.score_threshold,
        "metadata": det.metadata,
        "features": {"input_size": det.fe.input_size, "levels": [list(lv) for lv in det.fe.levels],
                     "metadata": det.fe.metadata},
    }
    arrays = {f"fe.{n}": getattr(det.fe, n) for n in feat._PARAM_NAMES}
    arrays.update({"w1": det.w1, "b1": det.b1, "w2": det.w2, "b2": det.b2})
    return container.pack(MAGIC, header, arrays)


def load_checkpoint(data: bytes) -> Detector:
    header, arrays = container.unpack(MAGIC, data)
    fh = header["features"]
    fe = feat.FeatureExtractor(**{n: arrays[f"fe.{n}"] for n in feat._PARAM_NAMES},
                               input_size=fh["input_size"], levels=fh["levels"], metadata=fh["metadata"])
    return Detector(fe, arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"],
                    header["score_threshold"], header["metadata"])
