"""Manifest-driven experiment runners.

Three experiments are scripted here:

* ``ood``: calibrate thresholds at a fixed false-positive rate on one
  image family and report true-positive rates on another, in both
  directions, for the log-density and the average-absolute-gradient score.
* ``correlation``: mean gradient inside correct vs incorrect detections.
* ``adaptation``: four ways of choosing camera parameters on bright-light
  scenes, scored by the number of correct detections.

Every runner writes CSV files with fixed formatting so that re-running a
manifest reproduces them byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import camsim as cs
from . import datasets
from . import detector as dt
from . import features as feat
from . import flow
from . import oodscore as oo
from . import optimizer as op
from .imageio import encode_ppm

log = logging.getLogger(__name__)

KINDS = ("ood", "correlation", "adaptation")
CONDITIONS = ("default", "auto", "nf", "nf_gradient")
SPLITS = {"train": 2000, "calibration": 500, "test": 500}
FAMILY_OFFSETS = {"nominal": 0, "bright-light": 1_000_000, "low-light": 2_000_000}


class ManifestError(ValueError):
    pass


@dataclass
class ExperimentManifest:
    """JSON-serializable description of one experiment run.

    ``checkpoints`` maps roles to file paths: ``features``, ``detector``,
    ``flow`` (in-distribution flow), and for the OOD experiment ``flows``,
    a mapping from family name to a flow trained on that family.
    """

    kind: str
    seed: int = 0
    checkpoints: dict = field(default_factory=dict)
    overrides: dict = field(default_factory=dict)
    output_dir: str = "out"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ManifestError(f"unknown experiment kind {self.kind!r}")

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ManifestError(f"manifest is not valid JSON: {e}") from None
        if not isinstance(doc, dict) or "kind" not in doc:
            raise ManifestError("manifest must be an object with a 'kind' field")
        unknown = set(doc) - {"kind", "seed", "checkpoints", "overrides", "output_dir"}
        if unknown:
            raise ManifestError(f"unknown manifest fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            m = cls.from_json(fh.read())
        base = os.path.dirname(os.path.abspath(path))
        m.checkpoints = _resolve(m.checkpoints, base)
        if not os.path.isabs(m.output_dir):
            m.output_dir = os.path.join(base, m.output_dir)
        return m

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def get(self, key, default):
        return self.overrides.get(key, default)


def _resolve(ckpts, base):
    out = {}
    for k, v in ckpts.items():
        if isinstance(v, dict):
            out[k] = _resolve(v, base)
        else:
            out[k] = v if os.path.isabs(v) else os.path.join(base, v)
    return out


def _read(path, what):
    if path is None:
        raise ManifestError(f"manifest names no {what} checkpoint")
    if not os.path.exists(path):
        raise ManifestError(f"missing {what} checkpoint: {path}")
    with open(path, "rb") as fh:
        return fh.read()


def load_features(manifest):
    return feat.load_checkpoint(_read(manifest.checkpoints.get("features"), "features"))


def load_detector(manifest):
    return dt.load_checkpoint(_read(manifest.checkpoints.get("detector"), "detector"))


def load_flow(path, what="flow"):
    return flow.load_checkpoint(_read(path, what))


def write_csv(path, header, rows):
    """Write rows with ``\\n`` line endings; floats must already be formatted."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6g}"


# OOD detection

def family_seeds(family, split, seed=0, sizes=SPLITS):
    """Scene seeds for one split of a family; splits never overlap."""
    if family not in FAMILY_OFFSETS:
        raise ManifestError(f"unknown image family {family!r}")
    # the first 10k seeds of each family are left for extractor/detector data
    start = FAMILY_OFFSETS[family] + 10_000 + 100_000 * int(seed)
    for name, n in sizes.items():
        if name == split:
            return datasets.scene_seeds(start, n)
        start += n
    raise KeyError(split)


def family_images(family, split, seed=0, sizes=SPLITS):
    _, images = datasets.capture_set(family, family_seeds(family, split, seed, sizes))
    return images


def image_scores(model, fe, images, batch=100):
    """(log-density, average absolute gradient) per image."""
    lps, grads = [], []
    for i in range(0, len(images), batch):
        maps, lp = oo.gradient_maps(model, fe, images[i:i + batch])
        lps.append(lp)
        grads.append(maps.mean(axis=(1, 2)))
    return np.concatenate(lps), np.concatenate(grads)


def ood_table(models, fe, image_sets, alpha=0.05):
    """Rows (in-dist, ood, score, threshold, calib FPR, test FPR, TPR) for every ordered pair.

    ``models`` maps a family to its flow; ``image_sets[family]`` holds
    ``calibration`` and ``test`` image arrays.
    """
    rows = []
    scores = {}
    for fam_in, model in models.items():
        for fam, sets in image_sets.items():
            for split, imgs in sets.items():
                scores[fam_in, fam, split] = image_scores(model, fe, imgs)
    for fam_in in models:
        for fam_out in image_sets:
            if fam_out == fam_in and len(image_sets) > 1:
                continue
            cal = scores[fam_in, fam_in, "calibration"]
            test = scores[fam_in, fam_in, "test"]
            ood = scores[fam_in, fam_out, "test"]
            for k, (kind, direction) in enumerate((("log-density", oo.FLAG_IF_LESS),
                                                   ("avg-abs-gradient", oo.FLAG_IF_GREATER))):
                rule = oo.calibrate_threshold(cal[k], alpha, direction, kind)
                rows.append((fam_in, fam_out, kind, rule.threshold, rule.rate(cal[k]),
                             rule.rate(test[k]), rule.rate(ood[k])))
    return rows


OOD_HEADER = ("in_distribution", "ood", "score", "threshold", "calibration_fpr", "test_fpr", "tpr")


def run_ood_experiment(manifest: ExperimentManifest):
    fe = load_features(manifest)
    flows = manifest.checkpoints.get("flows")
    if not flows:
        raise ManifestError("ood manifest needs checkpoints.flows: {family: path}")
    families = manifest.get("families", sorted(flows))
    sizes = dict(SPLITS, **manifest.get("split_sizes", {}))
    models = {f: load_flow(flows[f], f"flow[{f}]") for f in flows}
    image_sets = {f: {s: family_images(f, s, manifest.seed, sizes) for s in ("calibration", "test")}
                  for f in families}
    rows = ood_table(models, fe, image_sets, manifest.get("alpha", 0.05))
    out = [(a, b, c, fmt(t), fmt(cf), fmt(tf), fmt(tp)) for a, b, c, t, cf, tf, tp in rows]
    write_csv(os.path.join(manifest.output_dir, "ood.csv"), OOD_HEADER, out)
    return rows


# correlation

def run_correlation_experiment(manifest: ExperimentManifest):
    fe = load_features(manifest)
    det = load_detector(manifest)
    model = load_flow(manifest.checkpoints.get("flow"))
    n = int(manifest.get("n_scenes", 200))
    if n <= 0:
        raise ManifestError("correlation experiment needs at least one scene")
    preset = manifest.get("preset", "nominal")
    seeds = datasets.scene_seeds(FAMILY_OFFSETS.get(preset, 0) + 500_000 + 1000 * manifest.seed, n)
    scenes, images = datasets.capture_set(preset, seeds, noise_tag=3)
    maps, dets = [], []
    for i in range(0, n, 100):
        m, _ = oo.gradient_maps(model, fe, images[i:i + 100])
        maps.extend(m)
        dets.extend(dt.detect_batch(det, images[i:i + 100]))
    result = dt.correlation_experiment(maps, dets, [sc.truth_boxes() for sc in scenes], seeds)
    per_box = [(iid, fmt(b.x), fmt(b.y), fmt(b.w), fmt(b.h), b.label, fmt(b.confidence),
                int(ok), fmt(v)) for iid, b, ok, v in result.rows]
    write_csv(os.path.join(manifest.output_dir, "correlation_boxes.csv"),
              ("scene", "x", "y", "w", "h", "label", "confidence", "correct", "mean_abs_gradient"), per_box)
    n_corr = sum(1 for r in result.rows if r[2])
    write_csv(os.path.join(manifest.output_dir, "correlation_summary.csv"),
              ("scenes", "n_correct", "n_incorrect", "mean_correct", "mean_incorrect", "ratio"),
              [(n, n_corr, len(result.rows) - n_corr, fmt(result.mean_correct),
                fmt(result.mean_incorrect), fmt(result.ratio))])
    return result


# adaptation

@dataclass
class TrialResult:
    trial: int
    scene_seed: int
    n_objects: int
    params: dict
    correct: dict
    correct_by_class: dict
    fitness: dict
    histories: dict


def evolution_config(manifest, trial_seed):
    return op.EvolutionConfig(
        population_size=int(manifest.get("population_size", 50)),
        mutation_rate=float(manifest.get("mutation_rate", 0.2)),
        iterations=int(manifest.get("iterations", 60)),
        elite_fraction=float(manifest.get("elite_fraction", 0.2)),
        seed=int(trial_seed),
    )


def config_diff(a: op.EvolutionConfig, b: op.EvolutionConfig):
    """Fields where two evolution configs differ (empty when identical)."""
    da, db = asdict(a), asdict(b)
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}


def run_trial(trial, manifest, model, fe, det, out_dir=None):
    scene_seed = FAMILY_OFFSETS["bright-light"] + 700_000 + 1000 * manifest.seed + trial
    scene = cs.generate_scene(scene_seed, "bright-light")
    truth = scene.truth_boxes(fe.input_size)
    run_seed = [manifest.seed, trial]
    cfg_nf = evolution_config(manifest, hash_seed(run_seed))
    cfg_grad = evolution_config(manifest, hash_seed(run_seed))
    if config_diff(cfg_nf, cfg_grad):
        raise AssertionError("optimized conditions must share one evolution config")

    res_nf = op.evolve(scene, cfg_nf, model, fe, det, op.LOG_DENSITY)
    res_grad = op.evolve(scene, cfg_grad, model, fe, det, op.ROI_GRADIENT)
    thetas = {
        "default": cs.DEFAULT,
        "auto": cs.auto_exposure(scene, [*run_seed, 5]),
        "nf": res_nf.best.params,
        "nf_gradient": res_grad.best.params,
    }
    eval_seed = [*run_seed, 99]
    images = cs.capture_batch(scene, list(thetas.values()), [eval_seed] * len(thetas), fe.input_size)
    boxes = dt.detect_batch(det, images)
    maps, _ = oo.gradient_maps(model, fe, images)
    correct, by_class = {}, {}
    for k, (cond, img) in enumerate(zip(thetas, images)):
        rep = dt.match(boxes[k], truth)
        correct[cond] = len(rep.correct)
        by_class[cond] = [sum(1 for b in rep.correct if b.label == c) for c in range(len(cs.CLASSES))]
        if out_dir is not None:
            d = os.path.join(out_dir, f"trial-{trial:03d}", cond)
            os.makedirs(d, exist_ok=True)
            with open(os.path.join(d, "capture.ppm"), "wb") as fh:
                fh.write(encode_ppm(img))
            pgm, factor = oo.GradientMap(maps[k]).to_pgm()
            with open(os.path.join(d, "gradient.pgm"), "wb") as fh:
                fh.write(pgm)
            with open(os.path.join(d, "gradient.factor.txt"), "w", encoding="utf-8") as fh:
                fh.write(f"{factor:.9g}\n")
    return TrialResult(trial, scene_seed, len(truth), {c: t.to_dict() for c, t in thetas.items()},
                       correct, by_class,
                       {"nf": res_nf.best.fitness, "nf_gradient": res_grad.best.fitness},
                       {"nf": res_nf.history, "nf_gradient": res_grad.history})


def hash_seed(parts):
    """Stable integer seed from a list of ints."""
    return int(np.random.default_rng(parts).integers(0, 2**31 - 1))


def adaptation_table(trials):
    """Per-class correct counts per condition plus a totals row."""
    rows = []
    for c, name in enumerate(cs.CLASSES):
        rows.append([name] + [sum(t.correct_by_class[cond][c] for t in trials) for cond in CONDITIONS])
    rows.append(["total"] + [sum(r[i + 1] for r in rows) for i in range(len(CONDITIONS))])
    return rows


def run_adaptation_experiment(manifest: ExperimentManifest, workers=1, progress=None):
    fe = load_features(manifest)
    det = load_detector(manifest)
    model = load_flow(manifest.checkpoints.get("flow"))
    n_trials = int(manifest.get("trials", 50))
    if n_trials <= 0:
        raise ManifestError("adaptation experiment needs at least one trial")
    out = manifest.output_dir
    dump = manifest.get("dump_images", True)

    def one(t):
        r = run_trial(t, manifest, model, fe, det, out if dump else None)
        if progress:
            progress(r)
        return r

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trials = list(pool.map(one, range(n_trials)))
    else:
        trials = [one(t) for t in range(n_trials)]

    write_csv(os.path.join(out, "adaptation.csv"), ("class", *CONDITIONS), adaptation_table(trials))
    write_csv(os.path.join(out, "adaptation_trials.csv"),
              ("trial", "scene_seed", "n_objects", *[f"correct_{c}" for c in CONDITIONS],
               "fitness_nf", "fitness_nf_gradient"),
              [(t.trial, t.scene_seed, t.n_objects, *[t.correct[c] for c in CONDITIONS],
                fmt(t.fitness["nf"]), fmt(t.fitness["nf_gradient"])) for t in trials])
    hist = []
    for t in trials:
        for cond in ("nf", "nf_gradient"):
            hist += [(t.trial, cond, i, fmt(v)) for i, v in enumerate(t.histories[cond])]
    write_csv(os.path.join(out, "adaptation_history.csv"), ("trial", "condition", "iteration", "best_fitness"), hist)
    params = [(t.trial, c, *[fmt(v) for v in t.params[c].values()]) for t in trials for c in CONDITIONS]
    write_csv(os.path.join(out, "adaptation_params.csv"), ("trial", "condition", *cs.PARAM_NAMES), params)
    return trials


def run_manifest(manifest: ExperimentManifest, **kw):
    runner = {"ood": run_ood_experiment, "correlation": run_correlation_experiment,
              "adaptation": run_adaptation_experiment}[manifest.kind]
    return runner(manifest, **kw)


# report

def render_table(header, rows, title=None):
    """Plain-text grid table."""
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    sep = "+" + "+".join("-" * (w + 2) for w in widths) + "+"

    def line(r):
        return "| " + " | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) + " |"

    out = [] if title is None else [title]
    out += [sep, line(cells[0]), sep.replace("-", "=")]
    for r in cells[1:]:
        if r[0] == "total":
            out.append(sep.replace("-", "="))
        out.append(line(r))
    out.append(sep)
    return "\n".join(out) + "\n"


def render_report(csv_text, title=None):
    rows = list(csv.reader(io.StringIO(csv_text)))
    if not rows:
        raise ValueError("empty CSV")
    return render_table(rows[0], rows[1:], title)
