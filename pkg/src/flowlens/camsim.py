"""Synthetic tabletop scenes and a parametric camera model.

A :class:`Scene` holds unbounded linear radiance.  :func:`render` pushes it
through a fixed camera pipeline controlled by seven parameters, and
:func:`capture` area-averages the result down to the extractor's input
size.  Radiance units are chosen so that tone-mapping is a plain clamp: a
nominally lit background sits near 0.5.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, field, fields

import numpy as np

from . import container
from .boxes import DetectionBox

SCENE_MAGIC = b"SCENE001"
PRESETS = ("nominal", "bright-light", "low-light")
CLASSES = ("disk", "square", "triangle", "cross")
CLASS_COLORS = np.array([
    [0.90, 0.18, 0.12],
    [0.15, 0.80, 0.20],
    [0.18, 0.28, 0.95],
    [0.92, 0.85, 0.15],
])

SCENE_SIZE = 64
CAPTURE_SIZE = 32
NOISE_SIGMA = 0.002
LUMA = np.array([0.299, 0.587, 0.114])
VISIBILITY_MARGIN = 0.08
SPECKLE = 0.15
# warm spill from the bright-light lamp; whitening it also desaturates object colours
LAMP_TINT = np.array([1.0, 0.8, 0.55])


@dataclass(frozen=True)
class CameraParams:
    """Camera settings; out-of-range values are clamped on construction."""

    backlight_compensation: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0
    exposure: float = 0.0
    gain: float = 1.0
    saturation: float = 1.0
    sharpness: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            lo, hi = PARAM_RANGES[f.name]
            object.__setattr__(self, f.name, float(min(max(getattr(self, f.name), lo), hi)))

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "CameraParams":
        return cls(*(float(v) for v in values))

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


PARAM_RANGES = {
    "backlight_compensation": (0.0, 1.0),
    "brightness": (-0.5, 0.5),
    "contrast": (0.25, 4.0),
    "exposure": (-3.0, 3.0),
    "gain": (1.0, 8.0),
    "saturation": (0.0, 2.0),
    "sharpness": (0.0, 2.0),
}
PARAM_NAMES = tuple(PARAM_RANGES)
PARAM_LOW = np.array([r[0] for r in PARAM_RANGES.values()])
PARAM_HIGH = np.array([r[1] for r in PARAM_RANGES.values()])
DEFAULT = CameraParams()


def probe_settings():
    """The 32 camera settings used to certify object visibility."""
    out = []
    for exposure in np.linspace(-3, 3, 8):
        for bc in (0.0, 1.0):
            for contrast in (1.0, 2.0):
                out.append(CameraParams(backlight_compensation=bc, contrast=contrast, exposure=exposure))
    return out


@dataclass
class Scene:
    radiance: np.ndarray
    objects: list = field(default_factory=list)
    lights: list = field(default_factory=list)
    preset: str = "nominal"
    seed: int = 0

    @property
    def size(self):
        return self.radiance.shape[0]

    def truth_boxes(self, image_size=CAPTURE_SIZE):
        """Ground-truth boxes rescaled to an image of ``image_size`` pixels."""
        return [b.scaled(image_size / self.size) for b in self.objects]


# scene generation

def _smooth_field(rng, size, n_waves=6, scale=1.0):
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.zeros((size, size))
    for _ in range(n_waves):
        fx, fy = rng.uniform(0.5, 4.0, 2) * rng.choice([-1, 1], 2)
        out += np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    return scale * out / n_waves


def _shape_mask(label, w, h):
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w
    v = (yy + 0.5) / h
    if label == 0:
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    if label == 1:
        return np.ones((h, w), dtype=bool)
    if label == 2:
        return np.abs(u - 0.5) <= 0.5 * v
    return (np.abs(u - 0.5) <= 1 / 6) | (np.abs(v - 0.5) <= 1 / 6)


def _background(rng, size, preset):
    base = 0.5 + _smooth_field(rng, size, scale=0.12)
    # fine speckle at capture resolution: a flat surface never looks like the tabletop
    speckle = rng.standard_normal((size // 2, size // 2))
    base = base + SPECKLE * np.kron(speckle, np.ones((2, 2)))
    if preset == "low-light":
        # striped weave texture distinguishes this family beyond its lighting
        yy, xx = np.mgrid[0:size, 0:size]
        base = base + 0.12 * np.sign(np.sin(2 * np.pi * (xx + yy) / 8.0))
    tint = np.array([1.0, 0.97, 0.92]) * rng.uniform(0.94, 1.06, 3)
    return np.clip(base, 0.05, 1.0)[..., None] * tint


def _place_objects(rng, size, n, keepout):
    boxes = []
    for _ in range(400):
        if len(boxes) == n:
            break
        s = 16 if rng.random() < 0.75 else 24
        x = 8 * rng.integers(0, (size - s) // 8 + 1) + rng.integers(-2, 3)
        y = 8 * rng.integers(0, (size - s) // 8 + 1) + rng.integers(-2, 3)
        x, y = int(np.clip(x, 0, size - s)), int(np.clip(y, 0, size - s))
        if any(x < b[0] + b[2] + 4 and b[0] < x + s + 4 and y < b[1] + b[3] + 4 and b[1] < y + s + 4
               for b in boxes):
            continue
        if keepout is not None:
            cx, cy, r = keepout
            nx, ny = np.clip(cx, x, x + s), np.clip(cy, y, y + s)
            if (nx - cx) ** 2 + (ny - cy) ** 2 < r * r:
                continue
        boxes.append((x, y, s, s))
    return boxes


def _compose(rng, preset):
    size = SCENE_SIZE
    albedo = _background(rng, size, preset)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    lights = []
    if preset == "nominal":
        illum = 1.0 + 0.08 * _smooth_field(rng, size, n_waves=2)
        keepout = None
    elif preset == "low-light":
        illum = 0.12 * (1.0 + 0.1 * _smooth_field(rng, size, n_waves=2))
        keepout = None
    else:
        cx, cy = size / 2 + rng.uniform(-6, 6, 2)
        r2 = (xx - cx) ** 2 + (yy - cy) ** 2
        ambient = 0.15
        spill = 24.0 / (1.0 + r2 / 9.0 ** 2)
        illum = ambient + spill[..., None] * LAMP_TINT
        lights.append((float(cx), float(cy), 5.0, 60.0))
        keepout = (cx, cy, 7.0)
    n = int(rng.integers(4, 9))
    placed = _place_objects(rng, size, n, keepout)
    objects = []
    for x, y, w, h in placed:
        label = int(rng.integers(0, len(CLASSES)))
        mask = _shape_mask(label, w, h)
        color = CLASS_COLORS[label] * rng.uniform(0.9, 1.05)
        region = albedo[y:y + h, x:x + w]
        region[mask] = np.clip(color, 0, 1)
        objects.append(DetectionBox(float(x), float(y), float(w), float(h), label, 1.0))
    radiance = albedo * (illum if illum.ndim == 3 else illum[..., None])
    for cx, cy, r, intensity in lights:
        lamp = ((xx - cx) ** 2 + (yy - cy) ** 2) <= r * r
        radiance[lamp] = intensity
    return radiance.astype(np.float32), objects, lights


def _contrasts(scene: Scene, imgs):
    """Per object, max over settings and channels of |inside mean - surround mean|."""
    pad = 3
    out = []
    for box in scene.objects:
        x, y, w, h = (int(v) for v in (box.x, box.y, box.w, box.h))
        x0, y0 = max(x - pad, 0), max(y - pad, 0)
        x1, y1 = min(x + w + pad, scene.size), min(y + h + pad, scene.size)
        inner = np.zeros((scene.size, scene.size), dtype=bool)
        inner[y:y + h, x:x + w] = True
        ring = np.zeros_like(inner)
        ring[y0:y1, x0:x1] = True
        ring &= ~inner
        diff = np.abs(imgs[:, inner].mean(axis=1) - imgs[:, ring].mean(axis=1))
        out.append(float(diff.max()))
    return np.array(out)


def visible_objects(scene: Scene, settings=None) -> list:
    """Per object: does it contrast with its surround by the margin under some setting?

    DEFAULT is tried first; the probe set is rendered only if some object fails it.
    """
    ok = _contrasts(scene, render_batch(scene, [DEFAULT])) >= VISIBILITY_MARGIN
    settings = settings if settings is not None else probe_settings()
    # extreme exposures first: they rescue the most objects per render
    order = sorted(settings, key=lambda t: (-abs(t.exposure), -t.exposure))
    for start in range(0, len(order), 4):
        if ok.all():
            break
        ok |= _contrasts(scene, render_batch(scene, order[start:start + 4])) >= VISIBILITY_MARGIN
    return [bool(v) for v in ok]


def generate_scene(seed: int, preset: str = "nominal") -> Scene:
    """Deterministic scene for ``(seed, preset)``; resamples until every object is visible."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    settings = probe_settings()
    for attempt in range(50):
        rng = np.random.default_rng([int(seed), PRESETS.index(preset), attempt])
        radiance, objects, lights = _compose(rng, preset)
        scene = Scene(radiance, objects, lights, preset, int(seed))
        if len(objects) >= 4 and all(visible_objects(scene, settings)):
            return scene
    raise RuntimeError(f"could not generate a valid {preset} scene for seed {seed}")


# camera pipeline

def _blur3(v):
    """Separable [1, 2, 1]/4 Gaussian on (N,H,W,C) with edge padding."""
    p = np.pad(v, ((0, 0), (1, 1), (0, 0), (0, 0)), mode="edge")
    v = 0.25 * p[:, :-2] + 0.5 * p[:, 1:-1] + 0.25 * p[:, 2:]
    p = np.pad(v, ((0, 0), (0, 0), (1, 1), (0, 0)), mode="edge")
    return 0.25 * p[:, :, :-2] + 0.5 * p[:, :, 1:-1] + 0.25 * p[:, :, 2:]


def sensor_response(radiance, thetas, seeds=None):
    """Steps 1-3 of the pipeline (exposure, gain + noise, backlight curve), pre-clamp."""
    P = np.stack([t.as_array() for t in thetas])[:, :, None, None, None]
    bc, _, _, exposure, gain = (P[:, i] for i in range(5))
    L = radiance[None].astype(np.float64) * np.exp2(exposure)
    L = L * gain
    if seeds is not None:
        noise = np.stack([np.random.default_rng(s).standard_normal(radiance.shape) for s in seeds])
        L = L + noise * (NOISE_SIGMA * gain)
    return np.maximum(L, 0.0) ** (1.0 / (1.0 + bc))


def render_batch(scene: Scene, thetas, seeds=None) -> np.ndarray:
    """Render ``scene`` under each parameter set; returns (N,H,W,3) float32.

    ``seeds`` gives one noise seed per setting; ``None`` renders noiselessly.
    """
    thetas = list(thetas)
    if seeds is not None and len(seeds) != len(thetas):
        raise ValueError("need one seed per parameter set")
    P = np.stack([t.as_array() for t in thetas])[:, :, None, None, None]
    brightness, contrast, saturation, sharpness = P[:, 1], P[:, 2], P[:, 5], P[:, 6]
    v = np.clip(sensor_response(scene.radiance, thetas, seeds), 0.0, 1.0)
    v = v + brightness
    v = (v - 0.5) * contrast + 0.5
    y = (v * LUMA).sum(axis=-1, keepdims=True)
    v = y + saturation * (v - y)
    v = v + sharpness * (v - _blur3(v))
    return np.clip(v, 0.0, 1.0).astype(np.float32)


def render(scene: Scene, theta: CameraParams = DEFAULT, seed=None) -> np.ndarray:
    return render_batch(scene, [theta], None if seed is None else [seed])[0]


def downsample(images, size=CAPTURE_SIZE):
    """Area-average (…,H,W,C) images down to ``size`` x ``size``."""
    h = images.shape[-3]
    if h % size:
        raise ValueError(f"cannot area-average {h} px down to {size} px")
    f = h // size
    *lead, _, _, c = images.shape
    return images.reshape(*lead, size, f, size, f, c).mean(axis=(-4, -2)).astype(np.float32)


def capture_batch(scene, thetas, seeds=None, size=CAPTURE_SIZE):
    return downsample(render_batch(scene, thetas, seeds), size)


def capture(scene: Scene, theta: CameraParams = DEFAULT, seed=None, size=CAPTURE_SIZE):
    return capture_batch(scene, [theta], None if seed is None else [seed], size)[0]


def saturated_fraction(scene: Scene, theta: CameraParams = DEFAULT) -> float:
    """Fraction of pixels with any channel at or above sensor saturation before clamping."""
    L = sensor_response(scene.radiance, [theta])[0]
    return float((L.max(axis=-1) >= 1.0).mean())


def mean_luma(img) -> float:
    return float((np.asarray(img, dtype=np.float64) * LUMA).sum(axis=-1).mean())


# persistence

def save_scene(scene: Scene) -> bytes:
    header = {
        "kind": "scene",
        "preset": scene.preset,
        "seed": scene.seed,
        "objects": [[b.label, b.x, b.y, b.w, b.h] for b in scene.objects],
        "lights": [list(map(float, light)) for light in scene.lights],
    }
    return container.pack(SCENE_MAGIC, header, {"radiance": scene.radiance})


def load_scene(data: bytes) -> Scene:
    header, arrays = container.unpack(SCENE_MAGIC, data)
    objects = [DetectionBox(x, y, w, h, int(label), 1.0) for label, x, y, w, h in header["objects"]]
    lights = [tuple(light) for light in header["lights"]]
    return Scene(arrays["radiance"], objects, lights, header["preset"], header["seed"])


def auto_exposure(scene: Scene, seed=None, lo=0.4, hi=0.6, max_steps=24):
    """Mean-luma exposure servo starting from DEFAULT; returns the settled parameters."""
    exposure = 0.0
    theta = DEFAULT
    for step in range(max_steps):
        theta = CameraParams(exposure=exposure)
        m = mean_luma(capture(scene, theta, None if seed is None else [*np.atleast_1d(seed), step]))
        if lo <= m <= hi:
            break
        target = 0.5
        delta = math.log2(target / max(m, 1e-3))
        new = min(max(exposure + 0.7 * delta, -3.0), 3.0)
        if abs(new - exposure) < 1e-3:
            break
        exposure = new
    return theta
