"""Comprehensive Learning Particle Swarm Optimization (maximization, box-bounded).

Each dimension of a particle's velocity is pulled toward the personal best of
an *exemplar* particle chosen per dimension by a fitness tournament. A
particle that leaves the box is not evaluated and keeps its personal best
until it drifts back in.

Randomness: the master seed is expanded with ``numpy.random.SeedSequence``
into one child stream per particle. Particle ``i`` draws, in order, its
initial position, its initial velocity, its exemplar assignments and, per
iteration, one ``r1`` per dimension, all from stream ``i``. Fitness calls
never touch the streams, so evaluating particles in parallel gives the same
trajectory as evaluating them serially.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import FitnessEvaluationFailure, ValidationError
from .tensor_io import ThresholdDocument

PC_MODES = ("ramped", "uniform", "paper-literal")


@dataclass(frozen=True)
class SwarmConfig:
    pop_size: int = 10
    max_iter: int = 500
    c: float = 1.49445
    a0: float = 0.9
    a1: float = 0.4
    refresh_gap: int = 7
    v_max_fraction: float = 0.2
    seed: Optional[int] = None
    learning_prob_mode: str = "uniform"
    inertia_literal: bool = False

    def __post_init__(self):
        if self.pop_size < 2:
            raise ValidationError("pop_size must be at least 2 for the exemplar tournament")
        if self.max_iter < 0:
            raise ValidationError("max_iter must be non-negative")
        if not 0.0 < self.v_max_fraction <= 1.0:
            raise ValidationError("v_max_fraction must be in (0, 1]")
        if self.a1 > self.a0:
            raise ValidationError("final inertia a1 must not exceed initial inertia a0")
        if self.refresh_gap < 1:
            raise ValidationError("refresh_gap must be positive")
        if self.learning_prob_mode not in PC_MODES:
            raise ValidationError(f"learning_prob_mode must be one of {PC_MODES}")

    def learning_probabilities(self) -> np.ndarray:
        n = self.pop_size
        if self.learning_prob_mode == "uniform":
            return np.full(n, 0.5)
        if self.learning_prob_mode == "paper-literal":
            return np.ones(n)
        i = np.arange(n)
        return 0.05 + 0.45 * (np.exp(10.0 * i / (n - 1)) - 1.0) / (math.exp(10.0) - 1.0)

    def as_dict(self):
        return asdict(self)


def inertia(iteration: int, config: SwarmConfig) -> float:
    """Linearly decaying inertia weight, a0 at iteration 0 and a1 at max_iter.

    With ``inertia_literal`` the product form ``a0 * (a0 - a1) * iter / max_iter``
    is used instead, for comparison runs only.
    """
    frac = iteration / config.max_iter if config.max_iter else 0.0
    if config.inertia_literal:
        return config.a0 * (config.a0 - config.a1) * frac
    return config.a0 - (config.a0 - config.a1) * frac


@dataclass
class Particle:
    position: np.ndarray
    velocity: np.ndarray
    pbest: np.ndarray
    pbest_fitness: float
    exemplar: np.ndarray
    stagnation: int


@dataclass
class Swarm:
    positions: np.ndarray
    velocities: np.ndarray
    pbest: np.ndarray
    pbest_fitness: np.ndarray
    exemplars: np.ndarray
    stagnation: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    v_max: np.ndarray
    learning_prob: np.ndarray
    rngs: list
    seed: int
    evaluations: int = 0

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def particle(self, i: int) -> Particle:
        return Particle(
            self.positions[i].copy(),
            self.velocities[i].copy(),
            self.pbest[i].copy(),
            float(self.pbest_fitness[i]),
            self.exemplars[i].copy(),
            int(self.stagnation[i]),
        )

    def best_index(self) -> int:
        return int(np.argmax(self.pbest_fitness))


@dataclass
class SwarmTrace:
    best: list = field(default_factory=list)
    mean: list = field(default_factory=list)
    out_of_bounds: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)

    def record(self, swarm: Swarm, n_out: int):
        self.best.append(float(swarm.pbest_fitness.max()))
        self.mean.append(float(swarm.pbest_fitness.mean()))
        self.out_of_bounds.append(int(n_out))
        self.evaluations.append(int(swarm.evaluations))

    def __len__(self):
        return len(self.best)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "best", "mean", "out_of_bounds_count", "evaluations"])
            for it, row in enumerate(zip(self.best, self.mean, self.out_of_bounds, self.evaluations)):
                w.writerow([it, repr(row[0]), repr(row[1]), row[2], row[3]])


def _evaluate(fitness, positions, indices, pool=None) -> np.ndarray:
    def call(i):
        try:
            value = float(fitness(positions[i].copy()))
        except Exception as exc:
            raise FitnessEvaluationFailure(i, positions[i], exc) from exc
        if math.isnan(value):
            raise FitnessEvaluationFailure(i, positions[i], ValueError("fitness returned NaN"))
        return value

    if pool is None:
        values = [call(i) for i in indices]
    else:
        values = list(pool.map(call, indices))
    return np.asarray(values, dtype=np.float64)


def assign_exemplar(particle_index: int, swarm: Swarm, rng: np.random.Generator) -> np.ndarray:
    """Pick, per dimension, whose personal best particle ``particle_index`` learns from.

    With probability Pc_i a dimension is won by the fitter of two distinct
    randomly drawn particles other than ``particle_index`` (both particles
    when the swarm has only two); otherwise it stays with the particle
    itself. An all-self result gets one random dimension reassigned to a
    random other particle.
    """
    n, dims = swarm.size, swarm.dim
    i = particle_index
    others = np.array([j for j in range(n) if j != i])
    pool = others if others.size >= 2 else np.arange(n)
    fit = swarm.pbest_fitness
    exemplar = np.full(dims, i, dtype=np.int64)
    for d in range(dims):
        if rng.random() < swarm.learning_prob[i]:
            a, b = rng.choice(pool, size=2, replace=False)
            exemplar[d] = a if fit[a] >= fit[b] else b
    if np.all(exemplar == i):
        d = int(rng.integers(dims))
        exemplar[d] = int(rng.choice(others))
    return exemplar


def init_swarm(config: SwarmConfig, fitness, lower, upper, pool=None) -> Swarm:
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if lower.shape != upper.shape or lower.ndim != 1 or np.any(upper <= lower):
        raise ValidationError("box bounds must be 1-D with upper > lower")
    seed = config.seed
    if seed is None:
        seed = int(np.random.SeedSequence().entropy % (2**63))
    children = np.random.SeedSequence(seed).spawn(config.pop_size)
    rngs = [np.random.default_rng(c) for c in children]
    n, dims = config.pop_size, lower.size
    v_max = config.v_max_fraction * (upper - lower)

    positions = np.empty((n, dims))
    velocities = np.empty((n, dims))
    for i, rng in enumerate(rngs):
        positions[i] = lower + (upper - lower) * rng.random(dims)
        velocities[i] = rng.uniform(-v_max, v_max)

    values = _evaluate(fitness, positions, range(n), pool)
    swarm = Swarm(
        positions=positions,
        velocities=velocities,
        pbest=positions.copy(),
        pbest_fitness=values,
        exemplars=np.zeros((n, dims), dtype=np.int64),
        stagnation=np.zeros(n, dtype=np.int64),
        lower=lower,
        upper=upper,
        v_max=v_max,
        learning_prob=config.learning_probabilities(),
        rngs=rngs,
        seed=seed,
        evaluations=n,
    )
    for i, rng in enumerate(rngs):
        swarm.exemplars[i] = assign_exemplar(i, swarm, rng)
    return swarm


def step(swarm: Swarm, fitness, iteration: int, config: SwarmConfig, pool=None) -> int:
    """Advance the swarm one iteration in place; return the out-of-box count.

    All moves are computed from the previous iteration's personal bests, then
    in-box particles are evaluated and personal bests updated in index order.
    """
    a = inertia(iteration, config)
    dims = np.arange(swarm.dim)
    for i, rng in enumerate(swarm.rngs):
        if swarm.stagnation[i] >= config.refresh_gap:
            swarm.exemplars[i] = assign_exemplar(i, swarm, rng)
            swarm.stagnation[i] = 0
        r1 = rng.random(swarm.dim)
        guide = swarm.pbest[swarm.exemplars[i], dims]
        v = a * swarm.velocities[i] + config.c * r1 * (guide - swarm.positions[i])
        swarm.velocities[i] = np.clip(v, -swarm.v_max, swarm.v_max)
        swarm.positions[i] = swarm.positions[i] + swarm.velocities[i]

    inside = np.all((swarm.positions >= swarm.lower) & (swarm.positions <= swarm.upper), axis=1)
    idx = np.flatnonzero(inside)
    values = _evaluate(fitness, swarm.positions, idx, pool)
    swarm.evaluations += idx.size
    for i, f in zip(idx, values):
        if f > swarm.pbest_fitness[i]:
            swarm.pbest[i] = swarm.positions[i]
            swarm.pbest_fitness[i] = f
            swarm.stagnation[i] = 0
        else:
            swarm.stagnation[i] += 1
    return int(swarm.size - idx.size)


@dataclass
class SwarmResult:
    best_position: np.ndarray
    best_fitness: float
    seed: int
    evaluations: int
    swarm: Swarm


def run_swarm(
    config: SwarmConfig,
    fitness: Callable[[np.ndarray], float],
    lower,
    upper,
    workers: int = 1,
    callback=None,
):
    """Maximize ``fitness`` over the box ``[lower, upper]``.

    Parameters
    ----------
    config : SwarmConfig
    fitness : callable
        Maps a position vector to a float; must be deterministic.
    lower, upper : array_like
        Box bounds, one entry per dimension.
    workers : int, default 1
        Threads used for fitness evaluation within an iteration; 0 picks a
        default. Results do not depend on this value.
    callback : callable, optional
        Called as ``callback(iteration, swarm)`` after initialization
        (iteration 0) and after every step.

    Returns
    -------
    SwarmResult, SwarmTrace
    """
    pool = ThreadPoolExecutor(max_workers=workers or None) if workers != 1 else None
    try:
        swarm = init_swarm(config, fitness, lower, upper, pool)
        trace = SwarmTrace()
        trace.record(swarm, 0)
        if callback is not None:
            callback(0, swarm)
        for it in range(config.max_iter):
            n_out = step(swarm, fitness, it, config, pool)
            trace.record(swarm, n_out)
            if callback is not None:
                callback(it + 1, swarm)
    finally:
        if pool is not None:
            pool.shutdown()
    b = swarm.best_index()
    result = SwarmResult(
        best_position=swarm.pbest[b].copy(),
        best_fitness=float(swarm.pbest_fitness[b]),
        seed=swarm.seed,
        evaluations=swarm.evaluations,
        swarm=swarm,
    )
    return result, trace


def optimize(config: SwarmConfig, fitness, k: int, m: int, workers: int = 1, callback=None, model_names=None):
    """Search entropy thresholds in ``[0, ln m]^k``; return a threshold document and trace."""
    result, trace = run_swarm(
        config, fitness, np.zeros(k), np.full(k, math.log(m)), workers=workers, callback=callback
    )
    cfg = config.as_dict()
    cfg["seed"] = result.seed
    doc = ThresholdDocument(
        thresholds=result.best_position,
        class_count=m,
        achieved_dice=result.best_fitness,
        seed=result.seed,
        model_names=model_names,
        config=cfg,
    )
    return doc, trace
