"""Non-learned focusing baselines.

Three ways to pick an input phase pattern that concentrates output
intensity on a target region: direct phase conjugation of a known
matrix, coordinate-wise sequential search over discrete phase levels,
and a genetic algorithm.  The two search methods only need a black-box
objective (phase vector -> real score), so they also run against
measured or simulated hardware.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core_sim import PhasePattern, ShapeError, TransmissionMatrix, fields_from_phases
from .rng import make_rng

Oracle = Callable[[np.ndarray], float]


@dataclass(frozen=True)
class TargetSpec:
    """Nonnegative output-mode weights summing to 1; support = region of interest."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.size == 0:
            raise ValueError("target weights are empty")
        if w.min() < 0.0:
            raise ValueError("target weights must be nonnegative")
        total = w.sum()
        if not np.isclose(total, 1.0, atol=1e-9):
            raise ValueError(f"target weights must sum to 1, got {total}")
        if not np.any(w > 0.0):
            raise ValueError("target support is empty")
        w = np.ascontiguousarray(w)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n_modes(self) -> int:
        return self.weights.size

    @property
    def flat(self) -> np.ndarray:
        return self.weights.reshape(-1)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.flat > 0.0)

    @staticmethod
    def single_mode(index: int, n_modes: int, grid_side: int | None = None) -> "TargetSpec":
        """All weight on one output mode (flat index)."""
        w = np.zeros(n_modes)
        w[index] = 1.0
        if grid_side is not None:
            w = w.reshape(grid_side, grid_side)
        return TargetSpec(weights=w)

    @staticmethod
    def points(points: list[tuple[int, int]], grid_side: int) -> "TargetSpec":
        """Equal weight on a set of (row, col) grid sites."""
        w = np.zeros((grid_side, grid_side))
        for r, c in points:
            w[r, c] = 1.0
        return TargetSpec(weights=w / w.sum())


@dataclass(frozen=True)
class GaConfig:
    """Genetic-search settings; mutation rate decays geometrically per generation."""

    population_size: int = 30
    generations: int = 100
    mutation_rate: float = 0.1
    mutation_decay: float = 0.995
    elite_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError(f"population_size must be >= 2, got {self.population_size}")
        if not 0.0 < self.elite_fraction < 1.0:
            raise ValueError(f"elite_fraction must be in (0, 1), got {self.elite_fraction}")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError(f"mutation_rate must be in [0, 1], got {self.mutation_rate}")
        if not 0.0 < self.mutation_decay <= 1.0:
            raise ValueError(f"mutation_decay must be in (0, 1], got {self.mutation_decay}")
        if self.generations < 0:
            raise ValueError("generations must be nonnegative")


@dataclass(frozen=True)
class OptimizeResult:
    """Best pattern found plus the objective trace (one entry per iteration)."""

    phase: PhasePattern
    objectives: np.ndarray
    evaluations: int


def objective(tm: TransmissionMatrix, phase: PhasePattern, target: TargetSpec) -> float:
    """Weighted sum of unnormalized output intensities."""
    if target.n_modes != tm.n_outputs:
        raise ShapeError(
            f"target has {target.n_modes} modes, matrix produces {tm.n_outputs}"
        )
    field = fields_from_phases(tm.entries, phase.flat)
    return float(target.flat @ (np.abs(field) ** 2))


def make_objective_oracle(tm: TransmissionMatrix, target: TargetSpec) -> Oracle:
    """White-box objective as a flat-phase-vector callable (for CSA/GA)."""
    if target.n_modes != tm.n_outputs:
        raise ShapeError(
            f"target has {target.n_modes} modes, matrix produces {tm.n_outputs}"
        )
    w = target.flat
    entries = tm.entries

    def oracle(phase_values: np.ndarray) -> float:
        field = fields_from_phases(entries, np.asarray(phase_values).reshape(-1))
        return float(w @ (np.abs(field) ** 2))

    return oracle


def phase_conjugate(tm: TransmissionMatrix, target: TargetSpec) -> PhasePattern:
    """Conjugate the weighted field sum: phi_n = -arg(sum_m w_m t_mn).

    Exactly optimal for a single-mode target; for multi-mode targets it
    maximizes a linear field proxy and the search methods can refine.
    Columns whose weighted sum vanishes get phase 0.
    """
    if target.n_modes != tm.n_outputs:
        raise ShapeError(
            f"target has {target.n_modes} modes, matrix produces {tm.n_outputs}"
        )
    col = target.flat @ tm.entries
    vals = np.mod(-np.angle(col) / (2.0 * np.pi), 1.0)
    vals[np.abs(col) == 0.0] = 0.0
    return PhasePattern(values=vals)


def continuous_sequential(
    oracle: Oracle,
    n: int,
    levels: int,
    sweeps: int = 1,
    seed: int | None = None,
    init: np.ndarray | None = None,
) -> OptimizeResult:
    """Coordinate-wise search over discrete phase levels.

    Visits the n elements in order, `sweeps` times.  For each element
    all `levels` values k/levels are tried with the rest held fixed and
    the best is kept immediately; ties keep the incumbent value, so a
    constant oracle returns the initial pattern unchanged.  Start point
    is `init` if given, else uniform random from `seed`, else all zeros.
    """
    if levels < 2:
        raise ValueError(f"levels must be >= 2, got {levels}")
    if init is not None:
        values = np.array(init, dtype=np.float64).reshape(-1).copy()
        if values.size != n:
            raise ShapeError(f"init has {values.size} elements, expected {n}")
    elif seed is not None:
        values = make_rng(seed).uniform(0.0, 1.0, size=n)
    else:
        values = np.zeros(n)

    candidates = np.arange(levels) / levels
    best = float(oracle(values))
    evals = 1
    trace = []
    for _ in range(max(sweeps, 0)):
        for i in range(n):
            incumbent = values[i]
            best_val = incumbent
            for cand in candidates:
                values[i] = cand
                score = float(oracle(values))
                evals += 1
                if score > best:
                    best = score
                    best_val = cand
            values[i] = best_val
            trace.append(best)
    return OptimizeResult(
        phase=PhasePattern(values=values),
        objectives=np.asarray(trace if trace else [best]),
        evaluations=evals,
    )


def genetic_optimize(
    oracle: Oracle,
    n: int,
    cfg: GaConfig,
    init: np.ndarray | None = None,
) -> OptimizeResult:
    """Genetic search over phase vectors in [0, 1]^n.

    Rank-proportional parent selection, uniform crossover, per-element
    mutation by uniform resampling at a geometrically decaying rate, and
    elitism.  Returns the best individual ever evaluated; the per-
    generation best-ever trace is non-decreasing by construction.
    `init` (population_size x n) overrides the random initial population.
    """
    rng = make_rng(cfg.seed)
    pop_size = cfg.population_size
    if init is not None:
        population = np.array(init, dtype=np.float64).copy()
        if population.shape != (pop_size, n):
            raise ShapeError(
                f"init population has shape {population.shape}, expected {(pop_size, n)}"
            )
    else:
        population = rng.uniform(0.0, 1.0, size=(pop_size, n))

    fitness = np.array([oracle(ind) for ind in population])
    evals = pop_size
    best_idx = int(np.argmax(fitness))
    best_phase = population[best_idx].copy()
    best_score = float(fitness[best_idx])
    trace = [best_score]

    n_elite = max(1, round(cfg.elite_fraction * pop_size))
    # rank weights: best individual gets weight pop_size, worst gets 1
    rank_w = np.arange(pop_size, 0, -1, dtype=np.float64)
    rank_w /= rank_w.sum()
    rate = cfg.mutation_rate

    for _ in range(cfg.generations):
        order = np.argsort(-fitness, kind="stable")
        elite = population[order[:n_elite]]
        elite_fit = fitness[order[:n_elite]]

        n_children = pop_size - n_elite
        parent_idx = rng.choice(pop_size, size=(2, n_children), p=rank_w)
        pa = population[order[parent_idx[0]]]
        pb = population[order[parent_idx[1]]]
        cross = rng.random((n_children, n)) < 0.5
        children = np.where(cross, pa, pb)
        mutate = rng.random((n_children, n)) < rate
        resampled = rng.uniform(0.0, 1.0, size=(n_children, n))
        children = np.where(mutate, resampled, children)

        child_fit = np.array([oracle(c) for c in children])
        evals += n_children
        population = np.vstack([elite, children])
        fitness = np.concatenate([elite_fit, child_fit])

        gen_best = int(np.argmax(fitness))
        if float(fitness[gen_best]) > best_score:
            best_score = float(fitness[gen_best])
            best_phase = population[gen_best].copy()
        trace.append(best_score)
        rate *= cfg.mutation_decay

    return OptimizeResult(
        phase=PhasePattern(values=best_phase),
        objectives=np.asarray(trace),
        evaluations=evals,
    )
