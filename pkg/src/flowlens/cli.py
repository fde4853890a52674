"""Command-line entry point: ``flowlens <command> [flags]``.

Exit codes: 0 success, 1 runtime error, 2 usage error.  Every command
takes ``--seed`` and writes only under ``--out``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import camsim as cs
from . import datasets
from . import detector as dt
from . import experiments as ex
from . import features as feat
from . import flow
from . import oodscore as oo
from .imageio import read_ppm

log = logging.getLogger("flowlens")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_bytes(path, what):
    if not path:
        raise UsageError(f"--{what} is required")
    if not os.path.isfile(path):
        raise UsageError(f"{what} file not found: {path}")
    with open(path, "rb") as fh:
        return fh.read()


def _write(out, name, data):
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, name)
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(path, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
        fh.write(data)
    return path


def threads(args):
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("FLOWLENS_THREADS", "1")
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"FLOWLENS_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


# commands

def cmd_gen_data(args):
    if args.n is not None and args.n <= 0:
        raise UsageError("--n must be positive")
    seeds = None
    if args.split:
        # same scenes the OOD experiment uses for this family and split
        seeds = ex.family_seeds(args.preset, args.split, args.seed)[:args.n]
    ds = datasets.make_dataset(args.preset, args.n or 600, args.seed, jitter=args.jitter, seeds=seeds)
    path = _write(args.out, "data.bin", datasets.save_dataset(ds))
    print(f"wrote {len(ds)} captures to {path}")


def cmd_train_features(args):
    ds = datasets.load_dataset(_read_bytes(args.data, "data"))
    clean = ds.clean()
    fe = feat.train_features(clean.images, clean.labels,
                             feat.FeatureTrainConfig(epochs=args.epochs, seed=args.seed))
    det = dt.train_detector(fe, ds.images, ds.boxes, len(cs.CLASSES),
                            dt.DetectorTrainConfig(epochs=args.detector_epochs, seed=args.seed))
    _write(args.out, "features.ckpt", feat.save_checkpoint(fe))
    _write(args.out, "detector.ckpt", dt.save_checkpoint(det))
    print(f"features train accuracy {fe.metadata['train_accuracy']}; "
          f"detector train accuracy {det.metadata['train_accuracy']:.4f}")


def cmd_train_flow(args):
    ds = datasets.load_dataset(_read_bytes(args.data, "data")).clean()
    fe = feat.load_checkpoint(_read_bytes(args.features, "features"))
    feats = np.concatenate([feat.extract(fe, ds.images[i:i + 256]) for i in range(0, len(ds), 256)])
    model = flow.train_flow(feats, flow.FlowTrainConfig(epochs=args.epochs, seed=args.seed))
    _write(args.out, "flow.ckpt", flow.save_checkpoint(model))
    print(f"flow final loss {model.metadata['final_loss']:.6g}")


def _models(args):
    model = flow.load_checkpoint(_read_bytes(args.flow, "flow"))
    fe = feat.load_checkpoint(_read_bytes(args.features, "features"))
    return model, fe


def _stem(path):
    return os.path.splitext(os.path.basename(path))[0]


def cmd_score(args):
    model, fe = _models(args)
    images = [read_ppm(p) for p in args.image]
    rows = []
    for p, img in zip(args.image, images):
        maps, lp = oo.gradient_maps(model, fe, img[None])
        rows += oo.score_rows(_stem(p), {"log-density": lp[0], "avg-abs-gradient": maps[0].mean()})
    os.makedirs(args.out, exist_ok=True)
    ex.write_csv(os.path.join(args.out, "scores.csv"), ("image", "score", "value"), rows)
    for r in rows:
        print(",".join(map(str, r)))


def cmd_gradmap(args):
    model, fe = _models(args)
    img = read_ppm(args.image)
    maps, lp = oo.gradient_maps(model, fe, img[None], args.variant,
                                args.reference if args.variant == oo.DENSITY_GRADIENT else None)
    gmap = oo.GradientMap(maps[0], args.variant)
    pgm, factor = gmap.to_pgm()
    stem = _stem(args.image)
    _write(args.out, f"{stem}.grad.pgm", pgm)
    _write(args.out, f"{stem}.grad.factor.txt", f"{factor:.9g}\n")
    ex.write_csv(os.path.join(args.out, f"{stem}.grad.csv"),
                 ("image", "variant", "avg_abs_gradient", "log_density", "pgm_factor"),
                 [(stem, args.variant, ex.fmt(maps[0].mean()), ex.fmt(lp[0]), f"{factor:.9g}")])
    print(f"wrote {os.path.join(args.out, stem + '.grad.pgm')}")


def _manifest(args, kind):
    try:
        m = ex.ExperimentManifest.load(args.manifest)
    except FileNotFoundError:
        raise UsageError(f"manifest not found: {args.manifest}") from None
    if m.kind != kind:
        raise UsageError(f"manifest kind is {m.kind!r}, expected {kind!r}")
    if args.out:
        m.output_dir = args.out
    m.seed = args.seed if args.seed is not None else m.seed
    return m


def cmd_ood_eval(args):
    m = _manifest(args, "ood")
    rows = ex.run_ood_experiment(m)
    with open(os.path.join(m.output_dir, "ood.csv"), encoding="utf-8") as fh:
        sys.stdout.write(ex.render_report(fh.read()))
    return rows


def cmd_correlate(args):
    m = _manifest(args, "correlation")
    res = ex.run_correlation_experiment(m)
    print(f"mean correct {res.mean_correct} mean incorrect {res.mean_incorrect} ratio {res.ratio}")


def cmd_adapt(args):
    m = _manifest(args, "adaptation")
    if args.full:
        m.overrides["iterations"] = 200
    if args.iterations is not None:
        m.overrides["iterations"] = args.iterations
    if args.trials is not None:
        m.overrides["trials"] = args.trials

    def progress(r):
        log.info("trial %d: %s", r.trial, r.correct)

    ex.run_adaptation_experiment(m, workers=threads(args), progress=progress)
    with open(os.path.join(m.output_dir, "adaptation.csv"), encoding="utf-8") as fh:
        sys.stdout.write(ex.render_report(fh.read(), "Correct detections per condition"))


def cmd_report(args):
    with open(args.csv_path, encoding="utf-8") as fh:
        text = ex.render_report(fh.read(), args.title)
    _write(args.out, f"{_stem(args.csv_path)}.txt", text)
    sys.stdout.write(text)


def build_parser():
    p = _Parser(prog="flowlens", description="Normalizing-flow gradients for camera parameter tuning.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker cap (falls back to FLOWLENS_THREADS, then 1)")
        sp.add_argument("-v", "--verbose", action="store_true")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate a labeled capture set")
    sp.add_argument("--preset", choices=cs.PRESETS, default="nominal")
    sp.add_argument("--n", type=int, default=None, help="number of scenes (default 600, or the whole split)")
    sp.add_argument("--split", choices=tuple(ex.SPLITS), default=None,
                    help="use the scene seeds of this split of the preset's family")
    sp.add_argument("--jitter", action="store_true", help="add camera-jittered copies for detector training")

    sp = add("train-features", cmd_train_features, "train the feature extractor and detector head")
    sp.add_argument("--data", required=True)
    sp.add_argument("--epochs", type=int, default=feat.FeatureTrainConfig.epochs)
    sp.add_argument("--detector-epochs", type=int, default=dt.DetectorTrainConfig.epochs)

    sp = add("train-flow", cmd_train_flow, "train the flow on extracted features")
    sp.add_argument("--data", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--epochs", type=int, default=flow.FlowTrainConfig.epochs)

    for name, fn, help_ in (("score", cmd_score, "log-density and average gradient scores"),
                            ("gradmap", cmd_gradmap, "absolute pixel-gradient map of one image")):
        sp = add(name, fn, help_)
        sp.add_argument("--flow", required=True)
        sp.add_argument("--features", required=True)
        if name == "score":
            sp.add_argument("--image", required=True, nargs="+")
        else:
            sp.add_argument("--image", required=True)
            sp.add_argument("--variant", choices=oo.VARIANTS, default=oo.LOG_DENSITY_GRADIENT)
            sp.add_argument("--reference", type=float, default=0.0,
                            help="reference log-density for the density-gradient variant")

    for name, fn, help_ in (("ood-eval", cmd_ood_eval, "OOD detection table from a manifest"),
                            ("correlate", cmd_correlate, "gradient vs detection correctness"),
                            ("adapt", cmd_adapt, "camera-parameter adaptation experiment")):
        sp = add(name, fn, help_)
        sp.add_argument("--manifest", required=True)
        if name == "adapt":
            sp.add_argument("--iterations", type=int, default=None)
            sp.add_argument("--trials", type=int, default=None)
            sp.add_argument("--full", action="store_true", help="run the full 200 iterations")

    sp = add("report", cmd_report, "render a result CSV as a text table")
    sp.add_argument("csv_path", metavar="CSV")
    sp.add_argument("--title", default=None)
    return p


_NEEDS_OUT = {"gen-data", "train-features", "train-flow", "score", "gradmap", "report"}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        if args.seed is None and args.command in _NEEDS_OUT:
            args.seed = 0
        if args.out is None and args.command in _NEEDS_OUT:
            raise UsageError(f"{args.command}: --out is required")
        threads(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
