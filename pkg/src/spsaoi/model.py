"""Closed-form AoI model for semi-persistent scheduling on a two-way highway.

Public configuration uses km/h, veh/km and milliseconds. Internally every
duration is in milliseconds, densities in vehicles per metre and speeds in
metres per second; conversion happens at the function boundary.

The pipeline for a decision (speed, RRI) is::

    density = Q / speed
    N_s = 2 * density * R_s              (sensed neighbours, even, >= 2)
    N_r = RRI * n_s / t_s                (selectable RBGs)
    P_coll(m) = 1 - (1 - 1/(N_r - N_s/2))^m
    channel(speed) -> (p_p, p_i) -> p_d  (two-state fading chain)
    T_q = mean_m { RRI + E[T_a](m)/(1 - p_d^2) + max(t_GAP, RRI/2) p_d/(1 - p_d) }
    T_t = omega / (B log2(1 + SNR))
    AoI = T_q + T_t
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .errors import (
    AbsorbingChainError,
    ConfigError,
    DegenerateChannelError,
    DegenerateScenarioError,
    DivergenceError,
    DomainError,
    FeasibilityError,
    InvalidChannelError,
    ResourceExhaustionError,
)
from .numerics import bessel_j0, marcum_q1

SPEED_OF_LIGHT = 299_792_458.0  # m/s
KMH_TO_MS = 1.0 / 3.6

# Relative slack for bound checks so that Q/v round-trips at the endpoints.
_BOUND_RTOL = 1e-9
# Slack for floor() on products such as 2 * 0.1 * 500.
_FLOOR_EPS = 1e-9
# Rounding residue tolerated before a probability is declared invalid.
_PROB_EPS = 1e-12


def _pair(value, name):
    try:
        lo, hi = (float(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a pair of numbers, got {value!r}") from None
    if not (0 < lo <= hi) or not math.isfinite(hi):
        raise ConfigError(f"{name} must satisfy 0 < lower <= upper, got {value!r}")
    return (lo, hi)


def _positive(obj, *names):
    for name in names:
        v = getattr(obj, name)
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            raise ConfigError(f"{type(obj).__name__}.{name} must be positive and finite, got {v!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    """Highway, traffic and SPS resource-pool parameters."""

    flow_q: float = 6000.0  # veh/h
    half_length: float = 1000.0  # m
    sensing_range: float = 500.0  # m
    rbgs_per_slot: int = 5
    slot_duration: float = 0.5  # ms, one slot at 30 kHz subcarrier spacing
    gap_min: float = 1.0  # ms
    speed_bounds: tuple[float, float] = (30.0, 120.0)  # km/h
    density_bounds: tuple[float, float] = (50.0, 200.0)  # veh/km
    rri_bounds: tuple[float, float] = (10.0, 100.0)  # ms

    def __post_init__(self):
        _positive(self, "flow_q", "half_length", "sensing_range", "rbgs_per_slot", "slot_duration", "gap_min")
        for name in ("speed_bounds", "density_bounds", "rri_bounds"):
            object.__setattr__(self, name, _pair(getattr(self, name), name))


@dataclass(frozen=True)
class ChannelConfig:
    """Fading-channel parameters.

    ``packet_duration`` is in seconds; its inverse is the rate that scales
    the Doppler frequency inside the Bessel correlation. ``doppler_factor``
    multiplies the vehicle speed before computing the Doppler shift (2.0
    models head-on relative speed).
    """

    carrier_freq: float = 5.9e9  # Hz
    fading_margin: float = 10.0  # linear
    packet_duration: float = 0.5e-3  # s
    frames_per_packet: int = 10
    doppler_factor: float = 1.0

    def __post_init__(self):
        _positive(self, "carrier_freq", "fading_margin", "packet_duration", "doppler_factor")
        if int(self.frames_per_packet) != self.frames_per_packet or self.frames_per_packet < 1:
            raise ConfigError(f"frames_per_packet must be an integer >= 1, got {self.frames_per_packet!r}")


@dataclass(frozen=True)
class RadioConfig:
    """Link budget for the Shannon transmission delay. Defaults give SNR = 15."""

    bandwidth: float = 10e6  # Hz
    tx_power: float = 0.2  # W
    channel_gain: float = 3e-12
    noise_psd: float = 4e-21  # W/Hz
    payload_bits: float = 2400.0

    def __post_init__(self):
        _positive(self, "bandwidth", "tx_power", "channel_gain", "noise_psd", "payload_bits")

    @property
    def snr(self) -> float:
        return self.tx_power * self.channel_gain / (self.noise_psd * self.bandwidth)


@dataclass(frozen=True)
class Decision:
    speed: float  # km/h
    rri: float  # ms

    def density(self, cfg: ScenarioConfig) -> float:
        return density_from_speed(cfg.flow_q, self.speed)


@dataclass(frozen=True)
class MarkovChannel:
    doppler: float
    loss_in_adverse: float
    correlation: float
    eta: float
    stay_adverse: float
    stay_ideal: float


CSV_COLUMNS = (
    "speed_kmh",
    "rri_ms",
    "density_veh_km",
    "n_s",
    "n_r",
    "mean_p_coll",
    "p_d",
    "t_q_ms",
    "t_t_ms",
    "aoi_ms",
)


@dataclass(frozen=True)
class AoiBreakdown:
    speed: float
    rri: float
    density: float
    sensed_count: int
    pool_size: int
    mean_collision: float
    packet_loss: float
    queuing_delay: float
    tx_delay: float
    aoi: float
    channel: MarkovChannel | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        """Flat snake_case mapping, keys in :data:`CSV_COLUMNS` order."""
        return dict(zip(CSV_COLUMNS, self.to_row()))

    def to_row(self) -> list:
        return [
            self.speed,
            self.rri,
            self.density,
            self.sensed_count,
            self.pool_size,
            self.mean_collision,
            self.packet_loss,
            self.queuing_delay,
            self.tx_delay,
            self.aoi,
        ]


# -- geometry and coupling -------------------------------------------------


def density_from_speed(flow_q: float, speed: float) -> float:
    """Greenshields coupling: density (veh/km) = flow (veh/h) / speed (km/h)."""
    if not (math.isfinite(speed) and speed > 0):
        raise DomainError(f"speed must be positive, got {speed!r}")
    return flow_q / speed


def vehicle_count(cfg: ScenarioConfig, density: float) -> int:
    """Number of vehicles on the segment [-L, L] at ``density`` veh/km."""
    lo, hi = cfg.density_bounds
    if not (lo * (1 - _BOUND_RTOL) <= density <= hi * (1 + _BOUND_RTOL)):
        raise FeasibilityError(f"density {density} veh/km outside density_bounds {cfg.density_bounds}", "density_bounds")
    return int(round(2.0 * density / 1000.0 * cfg.half_length))


def sensed_neighbors(density: float, sensing_range: float) -> int:
    """Even number of vehicles inside the sensing range, at least 2."""
    if not (density > 0 and sensing_range > 0):
        raise DomainError("density and sensing_range must be positive")
    n = math.floor(2.0 * density * sensing_range / 1000.0 + _FLOOR_EPS)
    n -= n % 2
    if n < 2:
        raise DegenerateScenarioError(f"only {n} sensed neighbours at density {density} veh/km")
    return n


def pool_size(rri: float, cfg: ScenarioConfig) -> int:
    """Number of RBGs selectable within one RRI."""
    lo, hi = cfg.rri_bounds
    if not (lo * (1 - _BOUND_RTOL) <= rri <= hi * (1 + _BOUND_RTOL)):
        raise FeasibilityError(f"rri {rri} ms outside rri_bounds {cfg.rri_bounds}", "rri_bounds")
    return math.floor(rri * cfg.rbgs_per_slot / cfg.slot_duration + _FLOOR_EPS)


# -- collisions ------------------------------------------------------------


def _free_resources(pool, sensed):
    free = pool - sensed / 2
    if free < 2:
        raise ResourceExhaustionError(f"pool of {pool} RBGs cannot serve {sensed // 2} contenders (free={free:g})")
    return free


def collision_probability(m: int, pool: int, sensed: int) -> float:
    """Collision probability for the m-th nearest transmitter (m hidden terminals)."""
    free = _free_resources(pool, sensed)
    if not (1 <= m <= sensed / 2):
        raise DomainError(f"m must lie in [1, {sensed // 2}], got {m}")
    return -math.expm1(m * math.log1p(-1.0 / free))


def _collision_vector(pool, sensed):
    free = _free_resources(pool, sensed)
    m = np.arange(1, sensed // 2 + 1, dtype=float)
    return -np.expm1(m * math.log1p(-1.0 / free))


def _collision_odds(pool, sensed):
    # P/(1-P) = (1 - 1/free)^-m - 1, exact even where P rounds to 1.
    free = _free_resources(pool, sensed)
    m = np.arange(1, sensed // 2 + 1, dtype=float)
    return np.expm1(-m * math.log1p(-1.0 / free))


def extra_collision_delay(rri: float, p_coll):
    """Mean extra delay (ms) of a geometric number of collided RRIs."""
    p = np.asarray(p_coll, dtype=float)
    if np.any(p >= 1):
        raise DivergenceError("collision probability >= 1 gives infinite expected delay")
    if np.any(p < 0):
        raise DomainError("collision probability must be nonnegative")
    out = rri * p / (1.0 - p)
    return float(out) if out.ndim == 0 else out


def collision_queuing_delay(d: Decision, cfg: ScenarioConfig) -> float:
    """Queuing time averaged over the N_s/2 nearest transmitters, collisions only."""
    check_feasible(d, cfg)
    sensed = sensed_neighbors(d.density(cfg), cfg.sensing_range)
    t_a = d.rri * _collision_odds(pool_size(d.rri, cfg), sensed)
    per_m = d.rri + t_a
    return float(2.0 / sensed * per_m.sum())


# -- channel ---------------------------------------------------------------


def _unit_interval(name, value):
    if value < -_PROB_EPS or value > 1 + _PROB_EPS or not math.isfinite(value):
        raise InvalidChannelError(f"{name}={value} outside [0, 1]")
    return min(1.0, max(0.0, value))


def markov_channel(speed: float, ch: ChannelConfig) -> MarkovChannel:
    """Two-state (ideal/adverse) fading chain for a vehicle at ``speed`` km/h.

    The correlation enters the Marcum Q arguments through its magnitude; the
    defining integral is even in its first argument, so this only matters
    when the Bessel correlation turns negative.
    """
    if not (math.isfinite(speed) and speed > 0):
        raise DomainError(f"speed must be positive, got {speed!r}")
    return _markov_channel(float(speed), ch)


@lru_cache(maxsize=4096)
def _markov_channel(speed, ch):
    f = ch.fading_margin
    doppler = ch.carrier_freq * speed * KMH_TO_MS * ch.doppler_factor / SPEED_OF_LIGHT
    p_e = -math.expm1(-1.0 / f)
    rho = bessel_j0(2.0 * math.pi * doppler * ch.packet_duration)
    one_minus_rho2 = 1.0 - rho * rho
    if one_minus_rho2 < 1e-12:
        raise DegenerateChannelError(f"channel correlation {rho} too close to 1 (Doppler {doppler:.3g} Hz)")
    eta = math.sqrt(2.0 / (f * one_minus_rho2))
    r_eta = abs(rho) * eta
    p_p = (marcum_q1(r_eta, eta) - marcum_q1(eta, r_eta)) / math.expm1(1.0 / f) + 1.0
    p_p = _unit_interval("stay_adverse", p_p)
    p_i = _unit_interval("stay_ideal", (1.0 - p_e * (2.0 - p_p)) / (1.0 - p_e))
    return MarkovChannel(doppler, p_e, rho, eta, p_p, p_i)


def stationary_weights(mc: MarkovChannel) -> tuple[float, float]:
    """Long-run (adverse, ideal) probabilities of the chain."""
    if mc.stay_adverse >= 1.0 or mc.stay_ideal >= 1.0:
        raise AbsorbingChainError("chain with a persistence probability of 1 has no unique stationary law")
    adverse = (1.0 - mc.stay_ideal) / (2.0 - mc.stay_adverse - mc.stay_ideal)
    ideal = 1.0 / (1.0 + (1.0 - mc.stay_ideal) / (1.0 - mc.stay_adverse))
    return adverse, ideal


def frame_failure_probabilities(stay_ideal: float, frames: int) -> list[float]:
    """``[l_0, ..., l_frames]``: P(some frame among the first i failed | ideal start).

    Frames sent in the adverse state always fail, and ``l_0 = 0``.
    """
    if frames < 0:
        raise DomainError("frames must be nonnegative")
    v_l = 1.0
    ls = [0.0]
    for _ in range(frames):
        ls.append(stay_ideal * ls[-1] + (1.0 - stay_ideal) * v_l)
    return ls


def packet_loss_probability(mc: MarkovChannel, frames: int) -> float:
    """Probability that a packet of ``frames`` link-layer frames is lost."""
    if int(frames) != frames or frames < 1:
        raise DomainError(f"frames must be an integer >= 1, got {frames!r}")
    adverse, ideal = stationary_weights(mc)
    l_last = frame_failure_probabilities(mc.stay_ideal, int(frames))[-1]
    return min(1.0, adverse * 1.0 + ideal * l_last)


# -- delays ------------------------------------------------------------------


def check_feasible(d: Decision, cfg: ScenarioConfig) -> None:
    """Raise :class:`FeasibilityError` naming the first violated bound."""
    for value, (lo, hi), name, unit in (
        (d.speed, cfg.speed_bounds, "speed_bounds", "km/h"),
        (d.rri, cfg.rri_bounds, "rri_bounds", "ms"),
    ):
        if not math.isfinite(value) or not (lo * (1 - _BOUND_RTOL) <= value <= hi * (1 + _BOUND_RTOL)):
            raise FeasibilityError(f"{name.split('_')[0]} {value} {unit} outside {name} [{lo}, {hi}]", name)
    rho = d.density(cfg)
    lo, hi = cfg.density_bounds
    if not (lo * (1 - _BOUND_RTOL) <= rho <= hi * (1 + _BOUND_RTOL)):
        raise FeasibilityError(
            f"implied density {rho:.6g} veh/km (flow {cfg.flow_q} / speed {d.speed}) outside density_bounds [{lo}, {hi}]",
            "density_bounds",
        )


def is_feasible(d: Decision, cfg: ScenarioConfig) -> bool:
    try:
        check_feasible(d, cfg)
    except FeasibilityError:
        return False
    return True


def queuing_delay(d: Decision, cfg: ScenarioConfig, p_d: float) -> float:
    """Mean SPS queuing delay (ms) with blind retransmission after channel loss.

    With ``p_d == 0`` this reduces exactly to :func:`collision_queuing_delay`.
    """
    if not (0.0 <= p_d < 1.0):
        if p_d >= 1.0:
            raise DivergenceError(f"packet loss {p_d} >= 1 gives unbounded queuing delay")
        raise DomainError(f"packet loss must be a probability, got {p_d}")
    check_feasible(d, cfg)
    sensed = sensed_neighbors(d.density(cfg), cfg.sensing_range)
    t_a = d.rri * _collision_odds(pool_size(d.rri, cfg), sensed)
    retx = max(cfg.gap_min, d.rri / 2.0) * p_d / (1.0 - p_d)
    per_m = d.rri + t_a / (1.0 - p_d * p_d) + retx
    return float(2.0 / sensed * per_m.sum())


def transmission_delay(r: RadioConfig) -> float:
    """Shannon-rate transmission time of the payload, in ms."""
    return 1e3 * r.payload_bits / (r.bandwidth * math.log2(1.0 + r.snr))


def aoi(
    d: Decision,
    cfg: ScenarioConfig,
    ch: ChannelConfig,
    r: RadioConfig,
    *,
    packet_loss: float | None = None,
) -> AoiBreakdown:
    """Evaluate the full model for one decision.

    ``packet_loss`` overrides the channel-derived loss probability; passing
    0.0 yields the collisions-only model.
    """
    check_feasible(d, cfg)
    density = d.density(cfg)
    sensed = sensed_neighbors(density, cfg.sensing_range)
    pool = pool_size(d.rri, cfg)
    pc = _collision_vector(pool, sensed)
    mc = markov_channel(d.speed, ch)
    p_d = packet_loss_probability(mc, ch.frames_per_packet) if packet_loss is None else packet_loss
    t_q = queuing_delay(d, cfg, p_d)
    t_t = transmission_delay(r)
    return AoiBreakdown(
        speed=float(d.speed),
        rri=float(d.rri),
        density=density,
        sensed_count=sensed,
        pool_size=pool,
        mean_collision=float(pc.mean()),
        packet_loss=p_d,
        queuing_delay=t_q,
        tx_delay=t_t,
        aoi=t_q + t_t,
        channel=mc,
    )


def config_dict(obj) -> dict:
    """Plain-dict view of a config dataclass (tuples become lists)."""
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(obj).items()}
