"""Search space of the AoI minimisation problem and two derivative-free optimizers.

The decision is ``(speed, rri)``; density follows from the fixed traffic
flow, so the density bounds shrink the admissible speed interval. Both
optimizers here, the exhaustive grid (the reference optimum) and a
real-coded genetic algorithm, evaluate through :class:`Objective`, which
checks every point against the constraints before calling the model.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InfeasibleSpaceError, ResourceExhaustionError
from .model import (
    AoiBreakdown,
    ChannelConfig,
    Decision,
    RadioConfig,
    ScenarioConfig,
    aoi,
    check_feasible,
)

TRACE_COLUMNS = ("iteration", "best_aoi_ms", "speed_kmh", "rri_ms", "current_aoi_ms")


@dataclass(frozen=True)
class SearchSpace:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    rri_step: float = 5.0  # ms
    speed_step: float = 1.0  # km/h

    def __post_init__(self):
        if not (self.rri_step > 0 and self.speed_step > 0):
            raise ConfigError("grid steps must be positive")


@dataclass(frozen=True)
class Candidate:
    decision: Decision
    aoi: float


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    best_aoi: float
    decision: Decision
    current_aoi: float


@dataclass
class OptimizerTrace:
    """Best-so-far history of one optimizer run."""

    method: str
    iterations: list[TraceRecord] = field(default_factory=list)
    evaluations: int = 0
    status: str = "completed"

    def record(self, iteration: int, best: Candidate, current_aoi: float | None = None) -> None:
        if self.iterations and best.aoi > self.iterations[-1].best_aoi:
            raise AssertionError("best-so-far AoI must be nonincreasing")
        cur = best.aoi if current_aoi is None else current_aoi
        self.iterations.append(TraceRecord(iteration, best.aoi, best.decision, cur))

    @property
    def best_aoi(self) -> list[float]:
        return [r.best_aoi for r in self.iterations]

    def rows(self):
        for r in self.iterations:
            yield [r.iteration, r.best_aoi, r.decision.speed, r.decision.rri, r.current_aoi]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            w.writerows(self.rows())
        return path


class Objective:
    """Memoised AoI evaluation with constraint checking.

    Points where the resource pool is exhausted are infeasible for the model
    and score ``inf``. Constraint violations raise, so an optimizer can never
    silently evaluate outside the feasible set.
    """

    def __init__(
        self,
        scenario: ScenarioConfig | None = None,
        channel: ChannelConfig | None = None,
        radio: RadioConfig | None = None,
        *,
        keep_log: bool = False,
    ):
        self.scenario = scenario or ScenarioConfig()
        self.channel = channel or ChannelConfig()
        self.radio = radio or RadioConfig()
        self._memo: dict[tuple[float, float], AoiBreakdown | None] = {}
        self.evaluations = 0
        self.log: list[Decision] | None = [] if keep_log else None

    def evaluate(self, speed: float, rri: float) -> AoiBreakdown | None:
        """Model breakdown at (speed, rri), or None if the pool is exhausted."""
        key = (float(speed), float(rri))
        if key in self._memo:
            return self._memo[key]
        d = Decision(*key)
        check_feasible(d, self.scenario)
        if self.log is not None:
            self.log.append(d)
        self.evaluations += 1
        try:
            out = aoi(d, self.scenario, self.channel, self.radio)
        except ResourceExhaustionError:
            out = None
        self._memo[key] = out
        return out

    def __call__(self, speed: float, rri: float) -> float:
        b = self.evaluate(speed, rri)
        return math.inf if b is None else b.aoi


def feasible_speed_interval(s: SearchSpace | ScenarioConfig) -> tuple[float, float]:
    """Speeds (km/h) whose implied density respects the density bounds."""
    cfg = s.scenario if isinstance(s, SearchSpace) else s
    v_lo, v_hi = cfg.speed_bounds
    d_lo, d_hi = cfg.density_bounds
    lo = max(v_lo, cfg.flow_q / d_hi)
    hi = min(v_hi, cfg.flow_q / d_lo)
    if lo > hi:
        raise InfeasibleSpaceError(
            f"no speed in {cfg.speed_bounds} km/h gives a density in {cfg.density_bounds} veh/km "
            f"at flow {cfg.flow_q} veh/h",
            "density_bounds",
        )
    return (lo, hi)


def _axis(lo, hi, step):
    n = int(math.floor((hi - lo) / step + 1e-9))
    pts = [lo + k * step for k in range(n + 1)]
    if hi - pts[-1] > 1e-9 * max(1.0, abs(hi)):
        pts.append(hi)
    else:
        pts[-1] = hi
    return pts


def grid_axes(s: SearchSpace) -> tuple[list[float], list[float]]:
    """``(rri values, speed values)``, both endpoints included."""
    v_lo, v_hi = feasible_speed_interval(s)
    r_lo, r_hi = s.scenario.rri_bounds
    return _axis(r_lo, r_hi, s.rri_step), _axis(v_lo, v_hi, s.speed_step)


def grid_search(
    s: SearchSpace,
    objective: Objective | None = None,
    *,
    shuffle_seed: int | None = None,
) -> tuple[Candidate, OptimizerTrace]:
    """Exhaustive search over the grid; ties go to smaller RRI, then smaller speed.

    ``shuffle_seed`` permutes the evaluation order (the winner does not
    change); the trace records best-so-far after every evaluation.
    """
    objective = objective or Objective(s.scenario)
    rris, speeds = grid_axes(s)
    points = [(r, v) for r in rris for v in speeds]
    if shuffle_seed is not None:
        random.Random(shuffle_seed).shuffle(points)
    trace = OptimizerTrace("grid")
    best_key = None
    best = None
    for i, (r, v) in enumerate(points):
        value = objective(v, r)
        key = (value, r, v)
        if best_key is None or key < best_key:
            best_key = key
            best = Candidate(Decision(v, r), value)
        trace.record(i, best, value)
    if best is None or not math.isfinite(best.aoi):
        raise InfeasibleSpaceError("every grid point is infeasible for the model")
    trace.evaluations = objective.evaluations
    return best, trace


@dataclass(frozen=True)
class GaConfig:
    population: int = 50
    generations: int = 50
    crossover_prob: float = 0.9
    mutation_sigma_frac: float = 0.05
    tournament_size: int = 3
    elites: int = 1
    seed: int = 7

    def __post_init__(self):
        if self.population < 2:
            raise ConfigError("population must be >= 2")
        if not (0 <= self.elites < self.population):
            raise ConfigError("elites must be in [0, population)")
        if self.generations < 1 or self.tournament_size < 1:
            raise ConfigError("generations and tournament_size must be >= 1")
        if not (0 <= self.crossover_prob <= 1) or self.mutation_sigma_frac < 0:
            raise ConfigError("crossover_prob must be in [0, 1] and mutation_sigma_frac >= 0")


def ga_optimize(
    s: SearchSpace,
    g: GaConfig = GaConfig(),
    objective: Objective | None = None,
    *,
    initial_population: list[Decision] | None = None,
) -> tuple[Candidate, OptimizerTrace]:
    """Real-coded GA over (speed, rri) in the feasible box.

    Tournament selection, uniform crossover, additive Gaussian mutation with
    per-variable sigma ``mutation_sigma_frac * range``, and ``elites``
    survivors copied unchanged. Offspring are clamped to the box, so every
    individual is a feasible decision. Returns the best individual ever
    evaluated; the trace has one record per generation.
    """
    objective = objective or Objective(s.scenario)
    rng = np.random.default_rng(g.seed)
    v_lo, v_hi = feasible_speed_interval(s)
    r_lo, r_hi = s.scenario.rri_bounds
    lo = np.array([v_lo, r_lo])
    hi = np.array([v_hi, r_hi])
    sigma = g.mutation_sigma_frac * (hi - lo)

    if initial_population is None:
        pop = lo + rng.random((g.population, 2)) * (hi - lo)
    else:
        if len(initial_population) != g.population:
            raise ConfigError("initial_population must have exactly `population` members")
        pop = np.array([[d.speed, d.rri] for d in initial_population], dtype=float)
        pop = np.clip(pop, lo, hi)

    trace = OptimizerTrace("ga")
    best = None
    for gen in range(g.generations):
        fit = np.array([objective(v, r) for v, r in pop])
        order = np.lexsort((pop[:, 0], pop[:, 1], fit))
        top = order[0]
        if best is None or fit[top] < best.aoi:
            best = Candidate(Decision(float(pop[top, 0]), float(pop[top, 1])), float(fit[top]))
        trace.record(gen, best, float(fit[top]))
        if gen == g.generations - 1:
            break

        children = [pop[i].copy() for i in order[: g.elites]]
        while len(children) < g.population:
            p1 = pop[_tournament(rng, fit, g.tournament_size)]
            p2 = pop[_tournament(rng, fit, g.tournament_size)]
            if rng.random() < g.crossover_prob:
                child = np.where(rng.random(2) < 0.5, p1, p2)
            else:
                child = p1.copy()
            if g.mutation_sigma_frac > 0:
                child = child + rng.normal(0.0, 1.0, 2) * sigma
            children.append(np.clip(child, lo, hi))
        pop = np.array(children)

    trace.evaluations = objective.evaluations
    return best, trace


def _tournament(rng, fit, size):
    idx = rng.integers(0, len(fit), size)
    return int(idx[np.argmin(fit[idx])])
