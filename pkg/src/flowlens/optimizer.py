"""Elitist evolutionary search over camera parameters.

Each generation keeps the best ``elite_fraction`` of the population
unchanged (their fitness is not re-measured) and refills the rest with
mutated copies of uniformly chosen elites.  Fitness is lower-is-better.
Per-candidate noise seeds are derived from ``(run seed, iteration, slot)``
so results do not depend on how evaluations are scheduled.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import camsim as cs
from . import detector as dt
from . import oodscore as oo

log = logging.getLogger(__name__)

ROI_GRADIENT = "roi-gradient"
LOG_DENSITY = "log-density"
OBJECTIVES = (ROI_GRADIENT, LOG_DENSITY)


@dataclass
class Genome:
    params: cs.CameraParams
    fitness: float = math.nan


def default_mutation_scale():
    return 0.1 * (cs.PARAM_HIGH - cs.PARAM_LOW)


@dataclass
class EvolutionConfig:
    population_size: int = 50
    mutation_rate: float = 0.20
    iterations: int = 200
    elite_fraction: float = 0.2
    mutation_scale: list = field(default_factory=lambda: default_mutation_scale().tolist())
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.elite_fraction < 1:
            raise ValueError("elite_fraction must lie in (0, 1)")
        if not 0 <= self.mutation_rate <= 1:
            raise ValueError("mutation_rate must lie in [0, 1]")
        if self.population_size < 2 or self.iterations < 0:
            raise ValueError("need population_size >= 2 and iterations >= 0")

    @property
    def n_elite(self):
        return max(1, int(round(self.elite_fraction * self.population_size)))


def mutate(genome: Genome, rate, scale, rng) -> Genome:
    """Perturb each parameter with probability ``rate`` by N(0, scale_i), then clamp."""
    values = genome.params.as_array()
    hit = rng.random(len(values)) < rate
    noise = rng.standard_normal(len(values)) * np.asarray(scale, dtype=np.float64)
    values = np.where(hit, values + noise, values)
    return Genome(cs.CameraParams.from_array(values))


def candidate_seed(run_seed, iteration, slot):
    return [int(run_seed), int(iteration), int(slot)]


class SceneObjective:
    """Batched fitness of camera settings on one scene.

    ``kind="roi-gradient"``: mean absolute log-density gradient over the union
    of boxes re-detected on each candidate image (whole-image mean when the
    detector returns nothing).  ``kind="log-density"``: negative whole-image
    log-density.
    """

    def __init__(self, scene, model, fe, detector=None, kind=ROI_GRADIENT,
                 variant=oo.LOG_DENSITY_GRADIENT, reference=None):
        if kind not in OBJECTIVES:
            raise ValueError(f"unknown objective {kind!r}")
        if kind == ROI_GRADIENT and detector is None:
            raise ValueError("roi-gradient objective needs a detector")
        self.scene, self.model, self.fe, self.detector = scene, model, fe, detector
        self.kind, self.variant, self.reference = kind, variant, reference

    def images(self, thetas, seeds):
        return cs.capture_batch(self.scene, thetas, seeds, self.fe.input_size)

    def from_images(self, images):
        if self.kind == LOG_DENSITY:
            return -oo.log_density_score(self.model, self.fe, images)
        maps, lp = oo.gradient_maps(self.model, self.fe, images, self.variant, self.reference)
        boxes = dt.detect_batch(self.detector, images)
        return np.array([oo.roi_objective(m, b) for m, b in zip(maps, boxes)])

    def __call__(self, thetas, seeds):
        thetas = list(thetas)
        try:
            out = np.asarray(self.from_images(self.images(thetas, seeds)), dtype=np.float64)
        except (ValueError, ArithmeticError):
            if len(thetas) == 1:
                return np.array([math.inf])
            return np.concatenate([self([t], [s]) for t, s in zip(thetas, seeds)])
        return np.where(np.isfinite(out), out, math.inf)


def evaluate(genome: Genome, scene, model, fe, detector, seed, kind=ROI_GRADIENT) -> float:
    """Fitness of a single genome (lower is better); errors give +inf."""
    return float(SceneObjective(scene, model, fe, detector, kind)([genome.params], [seed])[0])


@dataclass
class EvolutionResult:
    best: Genome
    history: list
    mean_history: list
    rows: list

    def log_rows(self):
        """(iteration, best fitness, mean fitness, *best params) per iteration."""
        return self.rows


def _rank(fitness):
    f = np.where(np.isnan(fitness), math.inf, fitness)
    return np.argsort(f, kind="stable")


def evolve_objective(objective, config: EvolutionConfig) -> EvolutionResult:
    """Run elitist evolution against a batched ``objective(thetas, seeds) -> fitness``."""
    rng = np.random.default_rng([config.seed, 11])
    n = config.population_size
    low, high = cs.PARAM_LOW, cs.PARAM_HIGH
    pop = [Genome(cs.DEFAULT)]
    pop += [Genome(cs.CameraParams.from_array(rng.uniform(low, high))) for _ in range(n - 1)]
    seeds = [candidate_seed(config.seed, 0, i) for i in range(n)]
    fit = objective([g.params for g in pop], seeds)
    for g, f in zip(pop, fit):
        g.fitness = float(f)

    best = min(pop, key=lambda g: (math.inf if math.isnan(g.fitness) else g.fitness))
    best = Genome(best.params, best.fitness)
    history, mean_history, rows = [], [], []

    def record(it):
        finite = [g.fitness for g in pop if math.isfinite(g.fitness)]
        history.append(best.fitness)
        mean_history.append(float(np.mean(finite)) if finite else math.inf)
        rows.append((it, best.fitness, mean_history[-1], *best.params.as_array().tolist()))

    record(0)
    n_elite = config.n_elite
    for it in range(1, config.iterations + 1):
        order = _rank(np.array([g.fitness for g in pop]))
        elites = [pop[i] for i in order[:n_elite]]
        children = [mutate(elites[int(rng.integers(n_elite))], config.mutation_rate,
                           config.mutation_scale, rng) for _ in range(n - n_elite)]
        seeds = [candidate_seed(config.seed, it, n_elite + j) for j in range(len(children))]
        fit = objective([c.params for c in children], seeds)
        for c, f in zip(children, fit):
            c.fitness = float(f)
            if c.fitness < best.fitness:
                best = Genome(c.params, c.fitness)
        pop = elites + children
        record(it)
    return EvolutionResult(best, history, mean_history, rows)


def evolve(scene, config: EvolutionConfig, model, fe, detector, kind=ROI_GRADIENT) -> EvolutionResult:
    return evolve_objective(SceneObjective(scene, model, fe, detector, kind), config)


def genome_document(result: EvolutionResult, config: EvolutionConfig, kind: str) -> dict:
    return {
        "objective": kind,
        "fitness": result.best.fitness,
        "params": result.best.params.to_dict(),
        "config": {
            "population_size": config.population_size,
            "mutation_rate": config.mutation_rate,
            "iterations": config.iterations,
            "elite_fraction": config.elite_fraction,
            "mutation_scale": list(config.mutation_scale),
            "seed": config.seed,
        },
    }
