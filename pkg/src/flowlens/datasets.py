"""Labeled capture sets drawn from the scene generator.

A dataset holds captured images, the class of each scene's dominant
(largest) object, and the ground-truth boxes.  Optional jittered copies
re-capture each scene under mildly perturbed exposure/contrast so the
detector sees some appearance variation; they are flagged so feature and
flow training can stick to clean DEFAULT captures.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import camsim as cs
from . import container
from .boxes import DetectionBox

MAGIC = b"FLDATA01"


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    boxes: list
    jittered: np.ndarray
    preset: str = "nominal"
    seeds: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def clean(self):
        """Subset without jittered copies."""
        keep = ~self.jittered
        return Dataset(self.images[keep], self.labels[keep],
                       [b for b, k in zip(self.boxes, keep) if k],
                       self.jittered[keep], self.preset,
                       [s for s, k in zip(self.seeds, keep) if k])


def dominant_label(scene: cs.Scene) -> int:
    """Class of the largest object (first one wins ties)."""
    areas = [b.area for b in scene.objects]
    return scene.objects[int(np.argmax(areas))].label


def scene_seeds(base, n):
    return [int(base) + i for i in range(n)]


def capture_set(preset, seeds, noise_tag=0, theta=cs.DEFAULT):
    """DEFAULT captures of ``generate_scene(seed, preset)`` for each seed."""
    scenes = [cs.generate_scene(s, preset) for s in seeds]
    images = np.stack([cs.capture(sc, theta, [s, noise_tag]) for s, sc in zip(seeds, scenes)])
    return scenes, images.astype(np.float32)


def make_dataset(preset="nominal", n=600, seed=0, jitter=False, seeds=None) -> Dataset:
    """Captures of scenes ``seed .. seed+n-1`` (or of explicit ``seeds``)."""
    seeds = scene_seeds(seed, n) if seeds is None else [int(s) for s in seeds]
    n = len(seeds)
    if n <= 0:
        raise ValueError("dataset size must be positive")
    scenes, images = capture_set(preset, seeds)
    labels = [dominant_label(sc) for sc in scenes]
    boxes = [sc.truth_boxes() for sc in scenes]
    flags = [False] * n
    all_seeds = list(seeds)
    if jitter:
        rng = np.random.default_rng([seed, 17])
        extra = []
        for s, sc in zip(seeds, scenes):
            th = cs.CameraParams(exposure=rng.uniform(-0.7, 0.7), contrast=rng.uniform(0.8, 1.25))
            extra.append(cs.capture(sc, th, [s, 1]))
        images = np.concatenate([images, np.stack(extra).astype(np.float32)])
        labels += labels
        boxes += [list(b) for b in boxes]
        flags += [True] * n
        all_seeds += seeds
    return Dataset(images, np.array(labels, dtype=np.int64), boxes, np.array(flags), preset, all_seeds)


def save_dataset(ds: Dataset) -> bytes:
    header = {
        "kind": "dataset",
        "preset": ds.preset,
        "seeds": [int(s) for s in ds.seeds],
        "boxes": [[[b.x, b.y, b.w, b.h, b.label] for b in bl] for bl in ds.boxes],
    }
    arrays = {
        "images": ds.images,
        "labels": ds.labels.astype(np.float32),
        "jittered": ds.jittered.astype(np.float32),
    }
    return container.pack(MAGIC, header, arrays)


def load_dataset(data: bytes) -> Dataset:
    header, arrays = container.unpack(MAGIC, data)
    boxes = [[DetectionBox(x, y, w, h, int(lab)) for x, y, w, h, lab in bl] for bl in header["boxes"]]
    return Dataset(arrays["images"], arrays["labels"].astype(np.int64), boxes,
                   arrays["jittered"] > 0.5, header["preset"], header["seeds"])
