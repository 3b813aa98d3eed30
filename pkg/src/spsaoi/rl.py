"""DDPG agent for choosing (RRI, speed), written directly on numpy.

The environment state is ``[speed, density, rri, p_d, mean P_coll]`` and an
action is the next ``[rri, speed]``. States and actions are normalised to
[0, 1] per dimension from the problem bounds. Actor and critic are small
ReLU multilayer perceptrons with hand-written backpropagation, trained by
plain SGD with target networks, a replay buffer and Ornstein-Uhlenbeck
exploration noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, TrainingDivergenceError
from .model import (
    ChannelConfig,
    Decision,
    RadioConfig,
    ScenarioConfig,
    markov_channel,
    packet_loss_probability,
)
from .optimize import (
    Candidate,
    Objective,
    OptimizerTrace,
    SearchSpace,
    feasible_speed_interval,
    grid_axes,
)

STATE_DIM = 5
ACTION_DIM = 2
CHECKPOINT_FORMAT = "spsaoi-ddpg-policy"
CHECKPOINT_VERSION = 1


# -- reward -----------------------------------------------------------------


@dataclass(frozen=True)
class RewardConfig:
    """Piecewise-linear reward on AoI.

    ``a1`` and ``a2`` of None are resolved from the scenario by
    :func:`resolve_reward_config`. ``floor`` is paid when the model cannot
    evaluate the chosen point (exhausted resource pool) and bounds every
    training reward from below.
    """

    n1: float = 100.0
    n2: float = 1.0
    a1: float | None = None
    a2: float | None = None
    mode: str = "continuous"
    floor: float = -10.0

    def __post_init__(self):
        if self.mode not in ("verbatim", "continuous"):
            raise ConfigError(f"reward mode must be 'verbatim' or 'continuous', got {self.mode!r}")
        if not self.n1 > 0:
            raise ConfigError("n1 must be positive")
        if self.a1 is not None and self.a2 is not None and not self.a2 < self.a1:
            raise ConfigError(f"need a2 < a1, got a1={self.a1}, a2={self.a2}")


def reward(aoi: float, rc: RewardConfig) -> float:
    """Reward for an AoI value (ms); three linear pieces split at ``a1`` > ``a2``.

    Slopes are ``-1/n1`` above a1, ``-1`` between, and ``-3`` below a2.
    ``verbatim`` adds ``(a2 - a1)`` on the lowest piece, which makes the
    function jump down by ``2 (a1 - a2)`` at a2; ``continuous`` adds
    ``(a1 - a2)`` instead.
    """
    if rc.a1 is None or rc.a2 is None:
        raise ConfigError("reward thresholds a1/a2 are unresolved")
    if not aoi >= 0:
        raise DomainError(f"aoi must be nonnegative, got {aoi}")
    base = -rc.a1 / rc.n1 + rc.n2
    if aoi > rc.a1:
        return -aoi / rc.n1 + rc.n2
    if aoi > rc.a2:
        return base + (rc.a1 - aoi)
    step = (rc.a2 - rc.a1) if rc.mode == "verbatim" else (rc.a1 - rc.a2)
    return base + step + 3.0 * (rc.a2 - aoi)


def resolve_reward_config(rc: RewardConfig, objective: Objective, space: SearchSpace | None = None) -> RewardConfig:
    """Fill missing thresholds with the 60th/30th AoI percentiles over the grid."""
    if rc.a1 is not None and rc.a2 is not None:
        return rc
    space = space or SearchSpace(objective.scenario)
    rris, speeds = grid_axes(space)
    values = [objective(v, r) for r in rris for v in speeds]
    values = np.array([x for x in values if math.isfinite(x)])
    a1 = rc.a1 if rc.a1 is not None else float(np.percentile(values, 60))
    a2 = rc.a2 if rc.a2 is not None else float(np.percentile(values, 30))
    return RewardConfig(rc.n1, rc.n2, a1, a2, rc.mode, rc.floor)


# -- environment --------------------------------------------------------------


@dataclass(frozen=True)
class RlState:
    speed: float
    density: float
    rri: float
    packet_loss: float
    collision: float


@dataclass(frozen=True)
class RlAction:
    next_rri: float
    next_speed: float


class SpsEnv:
    """The optimisation problem as an episodic MDP.

    The next state is the model's evaluation of the projected action;
    ``done`` is 1 exactly at the horizon.
    """

    def __init__(self, objective: Objective, reward_cfg: RewardConfig, horizon: int = 100):
        self.objective = objective
        self.scenario = objective.scenario
        self.reward_cfg = resolve_reward_config(reward_cfg, objective)
        self.horizon = horizon
        self.speed_range = feasible_speed_interval(self.scenario)
        self.rri_range = self.scenario.rri_bounds
        self.t = 0
        self.last_aoi = math.inf

    def observe(self, speed: float, rri: float) -> tuple[RlState, float]:
        """State at (speed, rri) and its AoI (inf if the pool is exhausted)."""
        b = self.objective.evaluate(speed, rri)
        if b is None:
            mc_loss = self._packet_loss(speed)
            return RlState(speed, self.scenario.flow_q / speed, rri, mc_loss, 1.0), math.inf
        return RlState(b.speed, b.density, b.rri, b.packet_loss, b.mean_collision), b.aoi

    def _packet_loss(self, speed):
        ch = self.objective.channel
        return packet_loss_probability(markov_channel(speed, ch), ch.frames_per_packet)

    def reset(self, speed: float | None = None, rri: float | None = None) -> RlState:
        self.t = 0
        speed = 0.5 * sum(self.speed_range) if speed is None else speed
        rri = 0.5 * sum(self.rri_range) if rri is None else rri
        state, self.last_aoi = self.observe(*self.project(RlAction(rri, speed)))
        return state

    def project(self, action: RlAction) -> tuple[float, float]:
        """Clamp an action into the feasible box; returns (speed, rri)."""
        if not (math.isfinite(action.next_rri) and math.isfinite(action.next_speed)):
            raise DomainError(f"non-finite action {action}")
        v_lo, v_hi = self.speed_range
        r_lo, r_hi = self.rri_range
        return min(v_hi, max(v_lo, action.next_speed)), min(r_hi, max(r_lo, action.next_rri))

    def step(self, state: RlState, action: RlAction) -> tuple[RlState, float, int]:
        speed, rri = self.project(action)
        nxt, value = self.observe(speed, rri)
        self.last_aoi = value
        # Near pool exhaustion AoI explodes (~1e13 ms); bound the penalty.
        r = self.reward_cfg.floor if not math.isfinite(value) else max(self.reward_cfg.floor, reward(value, self.reward_cfg))
        self.t += 1
        done = int(self.t >= self.horizon)
        return nxt, r, done

    # normalisation
    def normalize_state(self, s: RlState) -> np.ndarray:
        v_lo, v_hi = self.speed_range
        d_lo, d_hi = self.scenario.density_bounds
        r_lo, r_hi = self.rri_range
        return np.array(
            [
                _unit(s.speed, v_lo, v_hi),
                _unit(s.density, d_lo, d_hi),
                _unit(s.rri, r_lo, r_hi),
                s.packet_loss,
                s.collision,
            ]
        )

    def action_from_unit(self, a: np.ndarray) -> RlAction:
        a = np.clip(a, 0.0, 1.0)
        r_lo, r_hi = self.rri_range
        v_lo, v_hi = self.speed_range
        return RlAction(r_lo + float(a[0]) * (r_hi - r_lo), v_lo + float(a[1]) * (v_hi - v_lo))

    def action_to_unit(self, action: RlAction) -> np.ndarray:
        r_lo, r_hi = self.rri_range
        v_lo, v_hi = self.speed_range
        return np.array([_unit(action.next_rri, r_lo, r_hi), _unit(action.next_speed, v_lo, v_hi)])


def _unit(x, lo, hi):
    return 0.5 if hi == lo else (x - lo) / (hi - lo)


def env_step(env: SpsEnv, state: RlState, action: RlAction):
    return env.step(state, action)


# -- networks ---------------------------------------------------------------


@dataclass
class MlpParams:
    sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output: str = "identity"  # or "tanh"

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.sizes), [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.output)

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]


def init_mlp(sizes, rng, output="identity", final_scale=3e-3) -> MlpParams:
    """Fan-in uniform init for hidden layers, small uniform init for the last."""
    ws, bs = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = final_scale if i == len(sizes) - 2 else 1.0 / math.sqrt(n_in)
        ws.append(rng.uniform(-lim, lim, (n_in, n_out)))
        bs.append(rng.uniform(-lim, lim, n_out))
    return MlpParams(list(sizes), ws, bs, output)


def mlp_forward(p: MlpParams, x: np.ndarray):
    """Return ``(output, cache)`` for a batch ``x`` of shape (N, in)."""
    h = np.atleast_2d(x)
    inputs, pre = [], []
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        if i < last:
            h = np.maximum(z, 0.0)
        else:
            h = np.tanh(z) if p.output == "tanh" else z
    return h, (inputs, pre, h)


def mlp_backward(p: MlpParams, cache, grad_out: np.ndarray):
    """Backpropagate ``dL/d(output)``; returns ``(grad_weights, grad_biases, grad_input)``."""
    inputs, pre, out = cache
    g = grad_out * (1.0 - out * out) if p.output == "tanh" else grad_out
    gws = [None] * len(p.weights)
    gbs = [None] * len(p.weights)
    for i in range(len(p.weights) - 1, -1, -1):
        gws[i] = inputs[i].T @ g
        gbs[i] = g.sum(axis=0)
        g = g @ p.weights[i].T
        if i > 0:
            g = g * (pre[i - 1] > 0)
    return gws, gbs, g


def sgd_step(p: MlpParams, gws, gbs, lr: float) -> None:
    """In-place ``theta -= lr * grad``; pass a negative lr for ascent."""
    for w, gw in zip(p.weights, gws):
        w -= lr * gw
    for b, gb in zip(p.biases, gbs):
        b -= lr * gb


def soft_update(online: MlpParams, target: MlpParams, tau: float) -> MlpParams:
    """``target <- tau * online + (1 - tau) * target``, in place."""
    if online.sizes != target.sizes:
        raise ValueError(f"shape mismatch: {online.sizes} vs {target.sizes}")
    for src, dst in zip(online.arrays(), target.arrays()):
        if src.shape != dst.shape:
            raise ValueError(f"shape mismatch: {src.shape} vs {dst.shape}")
        dst *= 1.0 - tau
        dst += tau * src
    return target


@dataclass
class Networks:
    actor: MlpParams
    critic: MlpParams
    actor_target: MlpParams
    critic_target: MlpParams


def make_networks(rng, hidden=(64, 64)) -> Networks:
    actor = init_mlp([STATE_DIM, *hidden, ACTION_DIM], rng, output="tanh")
    critic = init_mlp([STATE_DIM + ACTION_DIM, *hidden, 1], rng)
    return Networks(actor, critic, actor.copy(), critic.copy())


def actor_action(actor: MlpParams, states: np.ndarray):
    """Deterministic policy in unit action coordinates: ``(tanh(.) + 1) / 2``."""
    out, cache = mlp_forward(actor, states)
    return 0.5 * (out + 1.0), cache


def critic_value(critic: MlpParams, states: np.ndarray, actions: np.ndarray):
    out, cache = mlp_forward(critic, np.hstack([np.atleast_2d(states), np.atleast_2d(actions)]))
    return out[:, 0], cache


# -- replay and noise ----------------------------------------------------------


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self):
        return len(self.rewards)


class ReplayBuffer:
    """Fixed-capacity ring buffer of normalised transitions."""

    def __init__(self, capacity: int, state_dim: int = STATE_DIM, action_dim: int = ACTION_DIM):
        if capacity < 1:
            raise ConfigError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.d = np.zeros(capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2, d) -> None:
        i = self.cursor
        self.s[i], self.a[i], self.r[i], self.s2[i], self.d[i] = s, a, r, s2, d
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        """Uniform minibatch without replacement from the stored entries."""
        if n > self.size:
            raise ValueError(f"cannot sample {n} from {self.size} stored transitions")
        idx = rng.choice(self.size, size=n, replace=False)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.d[idx])


class OUNoise:
    """Ornstein-Uhlenbeck process ``x += theta (mu - x) + sigma N(0, 1)``."""

    def __init__(self, size, rng, theta=0.15, sigma=0.2, mu=0.0):
        self.size = size
        self.rng = rng
        self.theta = theta
        self.sigma = sigma
        self.mu = mu
        self.state = np.full(size, mu, dtype=float)

    def reset(self):
        self.state = np.full(self.size, self.mu, dtype=float)

    def sample(self) -> np.ndarray:
        self.state = self.state + self.theta * (self.mu - self.state) + self.sigma * self.rng.standard_normal(self.size)
        return self.state


# -- DDPG steps -------------------------------------------------------------------


def select_action(actor: MlpParams, state_unit: np.ndarray, noise: OUNoise | None = None) -> np.ndarray:
    """Policy output plus exploration noise, clipped to the unit box."""
    a, _ = actor_action(actor, state_unit[None, :])
    a = a[0]
    if noise is not None:
        a = a + noise.sample()
    return np.clip(a, 0.0, 1.0)


def critic_target(batch: Batch, nets: Networks, gamma: float) -> np.ndarray:
    """Bootstrapped targets ``r + (1 - d) gamma Q'(s', mu'(s'))`` from the target nets."""
    a2, _ = actor_action(nets.actor_target, batch.next_states)
    q2, _ = critic_value(nets.critic_target, batch.next_states, a2)
    return batch.rewards + (1.0 - batch.dones) * gamma * q2


def critic_loss_and_grads(critic: MlpParams, batch: Batch, y: np.ndarray):
    q, cache = critic_value(critic, batch.states, batch.actions)
    resid = q - y
    loss = float(np.mean(resid * resid))
    gws, gbs, _ = mlp_backward(critic, cache, (2.0 / len(y)) * resid[:, None])
    return loss, gws, gbs


def critic_update(batch: Batch, nets: Networks, lr: float, gamma: float) -> float:
    """One SGD step on the mean-squared TD error; returns the pre-step loss."""
    y = critic_target(batch, nets, gamma)
    loss, gws, gbs = critic_loss_and_grads(nets.critic, batch, y)
    if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in (*gws, *gbs)):
        raise TrainingDivergenceError(f"critic loss is not finite ({loss})")
    sgd_step(nets.critic, gws, gbs, lr)
    return loss


def actor_gradient(actor: MlpParams, states: np.ndarray, dq_da):
    """Deterministic policy gradient of ``mean_s Q(s, mu(s))`` w.r.t. actor parameters.

    ``dq_da(states, actions)`` returns dQ/da per sample in unit action
    coordinates.
    """
    a, cache = actor_action(actor, states)
    g_a = dq_da(states, a) / len(states)
    # d(unit action)/d(tanh output) = 1/2
    gws, gbs, _ = mlp_backward(actor, cache, 0.5 * g_a)
    return gws, gbs, a


def critic_action_grad(critic: MlpParams):
    def dq_da(states, actions):
        _, cache = critic_value(critic, states, actions)
        _, _, g_in = mlp_backward(critic, cache, np.ones((len(states), 1)))
        return g_in[:, STATE_DIM:]

    return dq_da


def actor_update(batch: Batch, nets: Networks, lr: float) -> float:
    """Ascend the critic's value of the policy; critic parameters stay untouched.

    Returns the pre-step estimate of ``mean Q(s, mu(s))``.
    """
    gws, gbs, a = actor_gradient(nets.actor, batch.states, critic_action_grad(nets.critic))
    if not all(np.isfinite(g).all() for g in (*gws, *gbs)):
        raise TrainingDivergenceError("actor gradient is not finite")
    q, _ = critic_value(nets.critic, batch.states, a)
    sgd_step(nets.actor, gws, gbs, -lr)
    return float(q.mean())


# -- training --------------------------------------------------------------------


@dataclass(frozen=True)
class DdpgConfig:
    gamma: float = 0.99
    tau: float = 0.005
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    batch: int = 64
    buffer_capacity: int = 50_000
    episodes: int = 50
    epochs: int = 50
    steps_per_episode: int = 100
    ou_theta: float = 0.15
    ou_sigma: float = 0.2
    ou_sigma_final: float = 0.02
    reward_scale: float = 0.1
    eval_steps: int = 5
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 11

    def __post_init__(self):
        if not (0 < self.gamma < 1):
            raise ConfigError("gamma must be in (0, 1)")
        if not (0 < self.tau <= 1):
            raise ConfigError("tau must be in (0, 1]")
        if self.batch < 1 or self.buffer_capacity < self.batch:
            raise ConfigError("need batch >= 1 and buffer_capacity >= batch")
        if self.episodes < 0 or self.epochs < 1 or self.steps_per_episode < 1:
            raise ConfigError("episodes >= 0, epochs >= 1 and steps_per_episode >= 1 required")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass
class Policy:
    """Trained actor plus the bounds needed to map unit actions back to units."""

    actor: MlpParams
    rri_range: tuple[float, float]
    speed_range: tuple[float, float]
    state_ranges: dict = field(default_factory=dict)

    def act_unit(self, state_unit: np.ndarray) -> np.ndarray:
        return select_action(self.actor, np.asarray(state_unit, dtype=float))

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "layer_sizes": list(self.actor.sizes),
            "hidden_activation": "relu",
            "output_activation": self.actor.output,
            "weights": [w.ravel(order="C").tolist() for w in self.actor.weights],
            "biases": [b.tolist() for b in self.actor.biases],
            "rri_range": list(self.rri_range),
            "speed_range": list(self.speed_range),
            "state_ranges": self.state_ranges,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()))
        return path

    @classmethod
    def load(cls, path) -> "Policy":
        data = json.loads(Path(path).read_text())
        if data.get("format") != CHECKPOINT_FORMAT or data.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint {data.get('format')!r} v{data.get('version')!r}")
        sizes = data["layer_sizes"]
        ws = [np.array(w, dtype=float).reshape(n_in, n_out) for w, n_in, n_out in zip(data["weights"], sizes[:-1], sizes[1:])]
        bs = [np.array(b, dtype=float) for b in data["biases"]]
        actor = MlpParams(list(sizes), ws, bs, data["output_activation"])
        return cls(actor, tuple(data["rri_range"]), tuple(data["speed_range"]), data.get("state_ranges", {}))


def greedy_rollout(policy_actor: MlpParams, env: SpsEnv, steps: int) -> tuple[Decision, float]:
    """Run the noiseless policy from the box midpoint; returns the final decision and AoI."""
    state = env.reset()
    for _ in range(steps):
        a = select_action(policy_actor, env.normalize_state(state))
        state, _, _ = env.step(state, env.action_from_unit(a))
    return Decision(state.speed, state.rri), env.last_aoi


def train(
    ddpg_cfg: DdpgConfig = DdpgConfig(),
    reward_cfg: RewardConfig = RewardConfig(),
    scenario: ScenarioConfig | None = None,
    channel: ChannelConfig | None = None,
    radio: RadioConfig | None = None,
    *,
    objective: Objective | None = None,
) -> tuple[Policy, OptimizerTrace]:
    """Train a DDPG agent; the trace holds the greedy policy's AoI after each epoch."""
    cfg = ddpg_cfg
    objective = objective or Objective(scenario, channel, radio)
    env = SpsEnv(objective, reward_cfg, horizon=cfg.steps_per_episode)
    eval_env = SpsEnv(objective, env.reward_cfg, horizon=cfg.eval_steps)
    rng_init, rng_noise, rng_buf, rng_start = (
        np.random.Generator(np.random.PCG64(c)) for c in np.random.SeedSequence(cfg.seed).spawn(4)
    )
    nets = make_networks(rng_init, cfg.hidden)
    policy = Policy(
        nets.actor,
        env.rri_range,
        env.speed_range,
        {"density": list(objective.scenario.density_bounds)},
    )
    trace = OptimizerTrace("ddpg")
    if cfg.episodes == 0:
        trace.evaluations = objective.evaluations
        return policy, trace

    buf = ReplayBuffer(cfg.buffer_capacity)
    noise = OUNoise(ACTION_DIM, rng_noise, cfg.ou_theta, cfg.ou_sigma)
    total_steps = cfg.episodes * cfg.steps_per_episode
    per_epoch = np.array_split(np.arange(cfg.episodes), min(cfg.epochs, cfg.episodes))
    bad_updates = 0
    step = 0
    best = None
    for epoch, episodes in enumerate(per_epoch):
        for _ in episodes:
            v_lo, v_hi = env.speed_range
            r_lo, r_hi = env.rri_range
            state = env.reset(rng_start.uniform(v_lo, v_hi), rng_start.uniform(r_lo, r_hi))
            noise.reset()
            for _ in range(cfg.steps_per_episode):
                frac = step / max(1, total_steps - 1)
                noise.sigma = cfg.ou_sigma + (cfg.ou_sigma_final - cfg.ou_sigma) * frac
                s_unit = env.normalize_state(state)
                a_unit = select_action(nets.actor, s_unit, noise)
                nxt, r, done = env.step(state, env.action_from_unit(a_unit))
                buf.add(s_unit, a_unit, r * cfg.reward_scale, env.normalize_state(nxt), done)
                state = nxt
                step += 1
                if len(buf) >= cfg.batch:
                    batch = buf.sample(cfg.batch, rng_buf)
                    try:
                        critic_update(batch, nets, cfg.critic_lr, cfg.gamma)
                        actor_update(batch, nets, cfg.actor_lr)
                        bad_updates = 0
                    except TrainingDivergenceError:
                        bad_updates += 1
                        if bad_updates >= 10:
                            raise
                    soft_update(nets.actor, nets.actor_target, cfg.tau)
                    soft_update(nets.critic, nets.critic_target, cfg.tau)
                if done:
                    break
        d, value = greedy_rollout(nets.actor, eval_env, cfg.eval_steps)
        if best is None or value < best.aoi:
            best = Candidate(d, value)
        trace.record(epoch, best, value)
    trace.evaluations = objective.evaluations
    return policy, trace
