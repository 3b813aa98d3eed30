"""Monte Carlo estimators for the analytical building blocks.

Every estimator owns a ``numpy.random.Generator`` built from a PCG64 bit
generator seeded by :class:`McConfig`; PCG64 streams are stable across
platforms and numpy releases, so a fixed seed reproduces results bit for bit.
Sub-streams are split off with ``SeedSequence.spawn``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AbsorbingChainError, DivergenceError, DomainError
from .model import MarkovChannel

# Parallel chains used for the long-run occupancy estimate.
_GILBERT_LANES = 1000


@dataclass(frozen=True)
class McConfig:
    samples: int = 1_000_000
    seed: int = 2025

    def __post_init__(self):
        if int(self.samples) != self.samples or self.samples < 1:
            raise DomainError(f"samples must be an integer >= 1, got {self.samples!r}")
        if not (0 <= self.seed < 2**64):
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")


def make_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """``n`` independent generators derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def mc_extra_delay(rri: float, p_coll: float, mc: McConfig) -> float:
    """Sample mean of the extra delay caused by repeated collisions.

    Each sample runs Bernoulli(p_coll) rounds until the first success; every
    failed round costs one RRI.
    """
    if p_coll >= 1.0:
        raise DivergenceError("p_coll >= 1: expected extra delay is infinite")
    if p_coll < 0.0:
        raise DomainError("p_coll must be nonnegative")
    (rng,) = make_rngs(mc.seed, 1)
    failures = np.zeros(mc.samples, dtype=np.int64)
    active = np.arange(mc.samples)
    while active.size:
        failed = rng.random(active.size) < p_coll
        active = active[failed]
        failures[active] += 1
    return float(rri * failures.mean())


def _check_chain(ch: MarkovChannel):
    if ch.stay_adverse >= 1.0 or ch.stay_ideal >= 1.0:
        raise AbsorbingChainError("absorbing chain: persistence probability equals 1")


def _burn_in(ch: MarkovChannel) -> int:
    lam = abs(ch.stay_adverse + ch.stay_ideal - 1.0)
    if lam < 1e-6:
        return 1
    return min(100_000, max(50, math.ceil(math.log(1e-12) / math.log(lam))))


def mc_stationary_adverse(ch: MarkovChannel, mc: McConfig, rng: np.random.Generator | None = None) -> float:
    """Fraction of time the chain spends in the adverse state.

    Runs 1000 chains in parallel from the ideal state, discards a burn-in
    long enough for the initial condition to decay below 1e-12, then records
    ``samples`` states in total.
    """
    _check_chain(ch)
    if rng is None:
        (rng,) = make_rngs(mc.seed, 1)
    lanes = min(_GILBERT_LANES, mc.samples)
    steps = math.ceil(mc.samples / lanes)
    adverse = np.zeros(lanes, dtype=bool)
    leave_ideal = 1.0 - ch.stay_ideal
    count = 0
    recorded = 0
    for t in range(_burn_in(ch) + steps):
        u = rng.random(lanes)
        adverse = np.where(adverse, u < ch.stay_adverse, u < leave_ideal)
        if t >= _burn_in(ch):
            take = min(lanes, mc.samples - recorded)
            count += int(adverse[:take].sum())
            recorded += take
    return count / recorded


def mc_first_failure(ch: MarkovChannel, frames: int, mc: McConfig, rng: np.random.Generator | None = None) -> float:
    """P(at least one of ``frames`` frames fails | channel starts ideal).

    The chain moves before every frame; a frame fails iff it is sent in the
    adverse state. Unlike the stationary estimate this is well defined for
    absorbing chains (``stay_ideal = 1`` gives exactly 0).
    """
    if frames < 1:
        raise DomainError("frames must be >= 1")
    if rng is None:
        (rng,) = make_rngs(mc.seed, 1)
    adverse = np.zeros(mc.samples, dtype=bool)
    failed = np.zeros(mc.samples, dtype=bool)
    for _ in range(frames):
        u = rng.random(mc.samples)
        adverse = np.where(adverse, u < ch.stay_adverse, u < 1.0 - ch.stay_ideal)
        failed |= adverse
    return float(failed.mean())


def mc_gilbert(ch: MarkovChannel, frames: int, mc: McConfig) -> tuple[float, float]:
    """Return ``(stationary_adverse, first_failure)`` estimates."""
    _check_chain(ch)
    rng_stat, rng_fail = make_rngs(mc.seed, 2)
    return (
        mc_stationary_adverse(ch, mc, rng_stat),
        mc_first_failure(ch, frames, mc, rng_fail),
    )
