"""OOD scores: log-density, pixel gradient maps, ROI objective, FPR thresholds."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import flow
from . import features as feat
from .autodiff import Tape
from .boxes import union_mask
from .imageio import encode_pgm16

LOG_DENSITY_GRADIENT = "log-density-gradient"
DENSITY_GRADIENT = "density-gradient"
VARIANTS = (LOG_DENSITY_GRADIENT, DENSITY_GRADIENT)

FLAG_IF_GREATER = "flag-if-greater"
FLAG_IF_LESS = "flag-if-less"


class NonFiniteGradient(ArithmeticError):
    pass


@dataclass
class GradientMap:
    values: np.ndarray
    provenance: str = LOG_DENSITY_GRADIENT

    @property
    def shape(self):
        return self.values.shape

    def to_pgm(self):
        """16-bit max-normalized PGM bytes and the normalization factor."""
        return encode_pgm16(self.values)


def _check_dims(model, fe):
    if model.feature_dim != fe.feature_dim:
        raise ValueError(f"flow expects D={model.feature_dim}, extractor gives D={fe.feature_dim}")


def gradient_maps(model, fe, images, variant=LOG_DENSITY_GRADIENT, reference=None, dtype=np.float32):
    """Batched absolute pixel gradients of the log-density.

    Returns ``(maps, log_densities)`` with maps shaped (N, H, W): the channel
    mean of ``|d log p / d pixel|``.  With ``variant="density-gradient"`` each
    map is multiplied by ``exp(log p - reference)``, i.e. the gradient of
    ``p / exp(reference)``; ``reference`` must stay fixed across any set of
    maps that are compared with one another.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant == DENSITY_GRADIENT and reference is None:
        raise ValueError("density-gradient variant needs a reference log-density")
    _check_dims(model, fe)
    images = feat.check_images(fe, images)
    single = images.ndim == 3
    if single:
        images = images[None]
    tape = Tape(dtype)
    x = tape.leaf(images)
    logp = flow.record_log_density(tape, model, feat.record_extract(tape, fe, x))
    grad = tape.backward(tape.sum(logp))[x]
    maps = np.abs(grad).mean(axis=-1).astype(np.float64)
    lp = tape.value(logp).astype(np.float64)
    if variant == DENSITY_GRADIENT:
        maps = maps * np.exp(lp - reference)[:, None, None]
    bad = ~np.isfinite(maps)
    if bad.any():
        n, y, xx = np.argwhere(bad)[0]
        raise NonFiniteGradient(f"non-finite gradient at image {n}, pixel (y={y}, x={xx})")
    return (maps[0], lp[0]) if single else (maps, lp)


def gradient_map(model, fe, img, variant=LOG_DENSITY_GRADIENT, reference=None, dtype=np.float32) -> GradientMap:
    maps, _ = gradient_maps(model, fe, np.asarray(img)[None], variant, reference, dtype)
    return GradientMap(maps[0], variant)


def avg_abs_gradient_score(gmap) -> float:
    values = gmap.values if isinstance(gmap, GradientMap) else np.asarray(gmap)
    return float(values.mean())


def log_density_score(model, fe, img):
    """Log-density of the extracted features; scalar for one image, array for a batch."""
    _check_dims(model, fe)
    return flow.log_density(model, feat.extract(fe, img))


def roi_objective(gmap, rois) -> float:
    """Mean of the map over the pixel union of ``rois``; whole-image mean if the union is empty."""
    values = gmap.values if isinstance(gmap, GradientMap) else np.asarray(gmap)
    mask = union_mask(rois, *values.shape)
    if not mask.any():
        return float(values.mean())
    return float(values[mask].mean())


@dataclass
class OODDecisionRule:
    score_kind: str
    threshold: float
    direction: str
    warnings: list = field(default_factory=list)

    def flags(self, scores):
        scores = np.asarray(scores, dtype=np.float64)
        if self.direction == FLAG_IF_GREATER:
            return scores > self.threshold
        return scores < self.threshold

    def rate(self, scores):
        scores = np.asarray(scores)
        return float(self.flags(scores).mean()) if scores.size else float("nan")


def calibrate_threshold(scores, alpha=0.05, direction=FLAG_IF_GREATER, score_kind="score") -> OODDecisionRule:
    """Nearest-rank threshold so at most ``alpha`` of ``scores`` are flagged.

    For flag-if-greater the threshold is the sorted score at 1-indexed rank
    ``ceil((1 - alpha) N)``; flag-if-less mirrors it from the bottom.
    """
    s = np.sort(np.asarray(scores, dtype=np.float64))
    n = len(s)
    if n == 0:
        raise ValueError("calibration scores must be non-empty")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if direction not in (FLAG_IF_GREATER, FLAG_IF_LESS):
        raise ValueError(f"unknown direction {direction!r}")
    # floor(alpha*N) computed with a guard against representation error
    k = math.floor(alpha * n + 1e-9)
    notes = []
    if n < math.ceil(1 / alpha - 1e-9):
        msg = f"only {n} calibration scores for alpha={alpha}; threshold is degenerate"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
    tau = s[n - k - 1] if direction == FLAG_IF_GREATER else s[k]
    return OODDecisionRule(score_kind, float(tau), direction, notes)


def score_rows(image_id, scores: dict):
    """CSV rows ``(image-id, score-kind, value)``."""
    return [(image_id, kind, f"{float(v):.9g}") for kind, v in scores.items()]
