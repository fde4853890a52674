"""Axis-aligned boxes, IoU, and pixel-union masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DetectionBox:
    x: float
    y: float
    w: float
    h: float
    label: int = 0
    confidence: float = 1.0

    @property
    def x2(self):
        return self.x + self.w

    @property
    def y2(self):
        return self.y + self.h

    @property
    def area(self):
        return max(self.w, 0.0) * max(self.h, 0.0)

    def scaled(self, factor: float) -> "DetectionBox":
        return DetectionBox(self.x * factor, self.y * factor, self.w * factor, self.h * factor,
                            self.label, self.confidence)

    def clamped(self, width: int, height: int) -> "DetectionBox":
        x1 = min(max(self.x, 0.0), width)
        y1 = min(max(self.y, 0.0), height)
        x2 = min(max(self.x2, 0.0), width)
        y2 = min(max(self.y2, 0.0), height)
        return DetectionBox(x1, y1, x2 - x1, y2 - y1, self.label, self.confidence)


def iou(a: DetectionBox, b: DetectionBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return float(inter / union) if union > 0 else 0.0


def box_mask(box: DetectionBox, height: int, width: int) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside ``box`` (clamped to the image)."""
    b = box.clamped(width, height)
    mask = np.zeros((height, width), dtype=bool)
    if b.w <= 0 or b.h <= 0:
        return mask
    x1, y1 = int(np.ceil(b.x - 0.5)), int(np.ceil(b.y - 0.5))
    x2, y2 = int(np.ceil(b.x2 - 0.5)), int(np.ceil(b.y2 - 0.5))
    mask[y1:y2, x1:x2] = True
    return mask


def union_mask(boxes, height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    for b in boxes:
        mask |= box_mask(b, height, width)
    return mask
