"""Session-wide trained models, built with the same calls the CLI makes."""

import sys
from dataclasses import dataclass

import numpy as np
import pytest

from flowlens import datasets, detector as dt, experiments as ex, features as feat, flow


@dataclass
class Pipeline:
    fe: feat.FeatureExtractor
    det: dt.Detector
    model: flow.FlowModel
    root: str
    paths: dict

    def manifest(self, kind, out, **overrides):
        ck = {k: self.paths[k] for k in ("features", "detector", "flow")}
        return ex.ExperimentManifest(kind, seed=0, checkpoints=ck, overrides=overrides, output_dir=str(out))


def extract_all(fe, images, batch=256):
    return np.concatenate([feat.extract(fe, images[i:i + batch]) for i in range(0, len(images), batch)])


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    # gen-data --n 600 --jitter ; train-features
    ds = datasets.make_dataset("nominal", 600, 0, jitter=True)
    clean = ds.clean()
    fe = feat.train_features(clean.images, clean.labels, feat.FeatureTrainConfig())
    det = dt.train_detector(fe, ds.images, ds.boxes, 4, dt.DetectorTrainConfig())
    # gen-data --split train ; train-flow
    flow_data = datasets.make_dataset("nominal", seeds=ex.family_seeds("nominal", "train"))
    model = flow.train_flow(extract_all(fe, flow_data.images), flow.FlowTrainConfig())
    paths = {}
    for name, blob in (("features", feat.save_checkpoint(fe)), ("detector", dt.save_checkpoint(det)),
                       ("flow", flow.save_checkpoint(model))):
        paths[name] = str(root / f"{name}.ckpt")
        with open(paths[name], "wb") as fh:
            fh.write(blob)
    return Pipeline(fe, det, model, str(root), paths)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
