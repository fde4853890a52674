import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowlens import camsim as cs, features as feat, flow, optimizer as opt

TARGET = np.array([0.3, 0.1, 1.7, -1.0, 2.0, 0.5, 0.8])
SPAN = cs.PARAM_HIGH - cs.PARAM_LOW


class Quadratic:
    """Distance to TARGET in range-normalized units; records every call."""

    def __init__(self, noise=0.0):
        self.calls = []
        self.noise = noise

    def __call__(self, thetas, seeds):
        self.calls.append((list(thetas), list(seeds)))
        out = []
        for th, s in zip(thetas, seeds):
            d = ((th.as_array() - TARGET) / SPAN) ** 2
            jitter = np.random.default_rng(s).normal(0, self.noise) if self.noise else 0.0
            out.append(d.sum() + jitter)
        return np.array(out)


def small(**kw):
    base = dict(population_size=20, iterations=15, seed=0)
    base.update(kw)
    return opt.EvolutionConfig(**base)


def test_default_config_values():
    cfg = opt.EvolutionConfig()
    assert (cfg.population_size, cfg.mutation_rate, cfg.iterations, cfg.elite_fraction) == (50, 0.2, 200, 0.2)
    assert cfg.n_elite == 10
    np.testing.assert_allclose(cfg.mutation_scale, 0.1 * SPAN)


@pytest.mark.parametrize("kw", [{"elite_fraction": 0}, {"elite_fraction": 1}, {"mutation_rate": 1.5},
                                {"population_size": 1}, {"iterations": -1}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        opt.EvolutionConfig(**kw)


def test_mutate_rate_zero_and_scale_zero_are_identity():
    g = opt.Genome(cs.CameraParams(exposure=1.0, gain=3.0))
    rng = np.random.default_rng(0)
    assert opt.mutate(g, 0.0, 0.1 * SPAN, rng).params == g.params
    assert opt.mutate(g, 1.0, np.zeros(7), rng).params == g.params


def test_mutation_rate_is_per_gene():
    rng = np.random.default_rng(123)
    g = opt.Genome(cs.CameraParams(exposure=0.5, gain=4.0, contrast=2.0, brightness=0.1,
                                   saturation=1.0, sharpness=1.0, backlight_compensation=0.5))
    base = g.params.as_array()
    changed = 0
    for _ in range(10_000):
        changed += int((opt.mutate(g, 0.2, 0.1 * SPAN, rng).params.as_array() != base).sum())
    assert 0.19 <= changed / 70_000 <= 0.21


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1.0, 50.0), st.floats(0, 1))
def test_mutation_stays_in_range(seed, big, rate):
    g = opt.Genome(cs.CameraParams.from_array(cs.PARAM_HIGH))
    m = opt.mutate(g, rate, big * SPAN, np.random.default_rng(seed))
    v = m.params.as_array()
    assert np.all(v >= cs.PARAM_LOW) and np.all(v <= cs.PARAM_HIGH)


def test_initial_population_contains_default():
    obj = Quadratic()
    opt.evolve_objective(obj, small(iterations=0))
    thetas, seeds = obj.calls[0]
    assert thetas[0] == cs.DEFAULT and len(thetas) == 20
    assert seeds[3] == [0, 0, 3]


def test_zero_iterations_returns_best_initial():
    obj = Quadratic()
    res = opt.evolve_objective(obj, small(iterations=0))
    first = obj(*obj.calls[0])
    assert res.best.fitness == first.min()
    assert res.history == [first.min()]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**20), st.floats(0, 0.5))
def test_history_monotone_non_increasing(seed, noise):
    res = opt.evolve_objective(Quadratic(noise), small(seed=seed))
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))
    assert res.best.fitness == res.history[-1]


def test_every_genome_in_range():
    obj = Quadratic()
    opt.evolve_objective(obj, small())
    for thetas, _ in obj.calls:
        for th in thetas:
            v = th.as_array()
            assert np.all(v >= cs.PARAM_LOW) and np.all(v <= cs.PARAM_HIGH)


def test_elites_are_kept_and_not_re_evaluated():
    obj = Quadratic()
    cfg = small()
    opt.evolve_objective(obj, cfg)
    assert len(obj.calls[1][0]) == cfg.population_size - cfg.n_elite
    assert obj.calls[1][1][0] == [0, 1, cfg.n_elite]


def test_converges_towards_target():
    res = opt.evolve_objective(Quadratic(), opt.EvolutionConfig(iterations=60, seed=1))
    assert res.best.fitness < 0.01


def test_fixed_seed_bit_identical():
    a = opt.evolve_objective(Quadratic(0.1), small(seed=5))
    b = opt.evolve_objective(Quadratic(0.1), small(seed=5))
    assert a.history == b.history and a.best.params == b.best.params
    assert a.rows == b.rows


def test_scheduling_does_not_change_result():
    class OneAtATime(Quadratic):
        def __call__(self, thetas, seeds):
            return np.concatenate([super(OneAtATime, self).__call__([t], [s]) for t, s in zip(thetas, seeds)])

    a = opt.evolve_objective(Quadratic(0.2), small(seed=2))
    b = opt.evolve_objective(OneAtATime(0.2), small(seed=2))
    assert a.history == b.history and a.best.params == b.best.params


def test_nan_fitness_ranks_last():
    def obj(thetas, seeds):
        return np.array([math.nan if i % 2 else float(i) for i in range(len(thetas))])
    res = opt.evolve_objective(obj, small(iterations=2))
    assert res.best.fitness == 0.0


# scene objectives with untrained models

@pytest.fixture(scope="module")
def scene_models():
    fe = feat.init_extractor(seed=0)
    model = flow.init_flow(fe.feature_dim)
    return cs.generate_scene(0, "bright-light"), model, fe


def test_zero_extractor_objective_is_constant(scene_models):
    from flowlens import detector as dt
    scene, model, fe = scene_models
    zf = fe.zeroed()
    det = dt.Detector(zf, np.zeros((32, 32), np.float32), np.zeros(32, np.float32),
                      np.zeros((5, 32), np.float32), np.zeros(5, np.float32))
    res = opt.evolve(scene, small(iterations=3), model, zf, det)
    assert res.history == [0.0] * 4
    assert res.best.params == cs.DEFAULT


def test_log_density_objective_and_evaluate(scene_models):
    scene, model, fe = scene_models
    g = opt.Genome(cs.CameraParams(exposure=-1))
    f1 = opt.evaluate(g, scene, model, fe, None, [1, 2], kind=opt.LOG_DENSITY)
    f2 = opt.evaluate(g, scene, model, fe, None, [1, 2], kind=opt.LOG_DENSITY)
    assert f1 == f2
    img = cs.capture(scene, g.params, [1, 2])
    assert f1 == pytest.approx(-float(flow.log_density(model, feat.extract(fe, img))), rel=1e-5)


def test_objective_errors_become_inf(scene_models):
    scene, model, fe = scene_models
    bad = flow.init_flow(8)  # dimension mismatch raises inside evaluation
    obj = opt.SceneObjective(scene, bad, fe, None, opt.LOG_DENSITY)
    assert obj([cs.DEFAULT, cs.DEFAULT], [[0], [1]]).tolist() == [math.inf, math.inf]


def test_objective_validation(scene_models):
    scene, model, fe = scene_models
    with pytest.raises(ValueError):
        opt.SceneObjective(scene, model, fe, None, opt.ROI_GRADIENT)
    with pytest.raises(ValueError):
        opt.SceneObjective(scene, model, fe, None, "brightest")


def test_genome_document_is_json():
    cfg = small(iterations=1)
    res = opt.evolve_objective(Quadratic(), cfg)
    doc = json.loads(json.dumps(opt.genome_document(res, cfg, opt.ROI_GRADIENT)))
    assert doc["config"]["population_size"] == 20
    assert set(doc["params"]) == set(cs.PARAM_NAMES)
    assert len(res.log_rows()[0]) == 3 + 7
