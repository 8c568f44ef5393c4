"""Advantage actor-critic controller that picks which sensors transmit."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import nn

P_MIN = 1e-6
P_MAX = 1.0 - 1e-6


@dataclass(frozen=True)
class RewardConfig:
    kind: str = "quadratic"  # "quadratic" or "harmonic"
    k1: float = 200.0
    k2: float = 100.0
    zeta: float = 100.0
    K: float = 0.4
    zeta_prime: float = 0.75

    def __post_init__(self):
        if self.kind not in ("quadratic", "harmonic"):
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if min(self.k1, self.k2, self.zeta, self.zeta_prime) < 0:
            raise ValueError("reward constants must be nonnegative")
        if not 0.0 <= self.K <= 1.0:
            raise ValueError("K must lie in [0, 1]")

    def bounds(self, n):
        """Smallest and largest raw reward reachable with n sensors."""
        if self.kind == "quadratic":
            return -self.zeta, self.k1 - self.k2 / (n * n)
        return -self.zeta_prime, 1.0

    def normalize(self, raw, n):
        """Affine map of raw rewards onto [-1, 1]; used for reporting only."""
        lo, hi = self.bounds(n)
        if hi == lo:
            return 0.0 * np.asarray(raw)
        return 2.0 * (np.asarray(raw, dtype=np.float64) - lo) / (hi - lo) - 1.0


def reward(config, correct, d_active, n):
    """Raw reward for one decision, computed in exact rational arithmetic then rounded once."""
    if config.kind == "quadratic":
        if correct:
            return float(Fraction(config.k1) - Fraction(config.k2) * Fraction(d_active, n) ** 2)
        return -float(config.zeta)
    if correct:
        if d_active < 1:
            raise ValueError("a correct prediction needs at least one active sensor")
        k = Fraction(config.K)
        return float(k + (1 - k) / d_active)
    return -float(config.zeta_prime)


def reward_table(config, n):
    """(correct rewards indexed by d_active, incorrect reward); d_active=0 is never correct."""
    correct = np.array([-float("inf")] + [reward(config, True, d, n) for d in range(1, n + 1)])
    if config.kind == "quadratic":
        correct[0] = reward(config, True, 0, n)
    return correct, reward(config, False, 0, n)


def rewards(config, correct, d_active, n):
    """Vectorised :func:`reward` over arrays of outcomes."""
    correct = np.asarray(correct, dtype=bool)
    d = np.asarray(d_active, dtype=np.int64)
    if config.kind == "harmonic" and np.any(correct & (d < 1)):
        raise ValueError("a correct prediction needs at least one active sensor")
    hit, miss = reward_table(config, n)
    return np.where(correct, hit[d], miss)


@dataclass(frozen=True)
class AdvantageRecord:
    reward: float
    value: float
    next_value: float
    gamma: float
    advantage: float

    def holds(self):
        return self.advantage == self.reward + self.gamma * self.next_value - self.value


def advantage(r, v_s, v_next, gamma):
    return AdvantageRecord(reward=r, value=v_s, next_value=v_next, gamma=gamma,
                           advantage=r + gamma * v_next - v_s)


# ------------------------------------------------------------------ networks


def _trunk(n_sensors, state_size, channels, rng):
    c1, c2 = channels
    layers = nn.conv_p(n_sensors, c1, rng=rng) + [nn.ReLU()]
    layers += nn.conv_p(c1, c2, rng=rng) + [nn.ReLU()]
    flat = c2 * (state_size // 4) * (state_size // 4)
    return layers, flat


def build_actor(n_sensors, state_size=16, channels=(8, 16), rng=None):
    layers, flat = _trunk(n_sensors, state_size, channels, rng)
    layers += [nn.Dense(flat, n_sensors, rng=rng), nn.Sigmoid()]
    return nn.Network(layers, (n_sensors, state_size, state_size))


def build_critic(n_sensors, state_size=16, channels=(8, 16), rng=None):
    layers, flat = _trunk(n_sensors, state_size, channels, rng)
    layers += [nn.Dense(flat, 1, rng=rng)]
    return nn.Network(layers, (n_sensors, state_size, state_size))


def policy_forward(actor, states):
    """Transmit probabilities, clamped away from 0 and 1. Accepts (N,h,w) or (B,N,h,w)."""
    states = np.asarray(states, dtype=np.float64)
    single = states.ndim == 3
    p = actor.forward(states[None] if single else states)
    p = np.clip(p, P_MIN, P_MAX)
    return p[0] if single else p


def sample_action(p, rng, greedy=False):
    p = np.asarray(p)
    if greedy:
        return p > 0.5
    return rng.random(p.shape) < p


def log_prob(p, bits):
    p = np.clip(np.asarray(p, dtype=np.float64), P_MIN, P_MAX)
    bits = np.asarray(bits, dtype=bool)
    return np.sum(np.where(bits, np.log(p), np.log1p(-p)), axis=-1)


# --------------------------------------------------------------------- agent


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3000
    alpha: float = 1e-4  # actor learning rate
    beta: float = 1e-4  # critic learning rate
    gamma: float = 0.99
    optimizer: str = "rmsprop"
    batch_size: int = 1
    channels: tuple = (8, 16)
    reward: RewardConfig = field(default_factory=RewardConfig)
    audit: bool = False  # keep every AdvantageRecord


class Agent:
    def __init__(self, n_sensors, state_size=16, config=TrainConfig(), rng=None):
        self.n_sensors = n_sensors
        self.config = config
        self.actor = build_actor(n_sensors, state_size, config.channels, rng)
        self.critic = build_critic(n_sensors, state_size, config.channels, rng)
        self.actor_opt = nn.Optimizer(config.optimizer, config.alpha)
        self.critic_opt = nn.Optimizer(config.optimizer, config.beta)

    def probabilities(self, states):
        return policy_forward(self.actor, states)

    def value(self, states):
        return self.critic.forward(states)[:, 0]

    def greedy(self, states, batch_size=512):
        out = [self.probabilities(states[i:i + batch_size]) > 0.5
               for i in range(0, len(states), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.n_sensors), dtype=bool)


def update(agent, states, masks, advantages, context=None):
    """Apply one actor-critic step for a batch whose forward passes are cached.

    ``advantages`` holds A = R + gamma V(s') - V(s) per sample. The critic
    descends 0.5 * A**2 (gradient -A dV/dW); the actor ascends A log pi(a|s).
    Gradients are averaged over the batch.
    """
    adv = np.asarray(advantages, dtype=np.float64)
    b = len(adv)
    p = agent.actor.last_output
    bits = np.asarray(masks, dtype=np.float64)
    # d log pi / d logit_i = bits_i - p_i for a factored Bernoulli policy
    actor_logit_grad = -(adv[:, None] * (bits - p)) / b
    actor_grads, _ = agent.actor.backward(actor_logit_grad, skip_last=1, input_grad=False)
    critic_grads, _ = agent.critic.backward((-adv / b)[:, None], input_grad=False)
    agent.critic_opt.step(agent.critic.parameters(), critic_grads, context)
    agent.actor_opt.step(agent.actor.parameters(), actor_grads, context)


@dataclass
class EpochRecord:
    epoch: int
    mean_reward_raw: float
    mean_reward_normalized: float
    train_accuracy: float
    comm_overhead_fraction: float


def train(agent, env, config=None, rng=None, on_epoch=None):
    """Algorithm-1 loop over single-step episodes.

    ``env`` provides ``states`` (B, N, h, w) and ``evaluate(indices, masks)``
    returning per-sample correctness. Returns a list of :class:`EpochRecord`;
    with ``config.audit`` every advantage record is kept on ``agent.audit_log``.
    """
    config = agent.config if config is None else config
    rng = np.random.default_rng(0) if rng is None else rng
    n = agent.n_sensors
    rcfg = config.reward
    history = []
    agent.audit_log = [] if config.audit else None
    count = env.n_scenes
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(count)
        raw_sum = 0.0
        hits = 0
        active = 0
        for start in range(0, count, config.batch_size):
            rows = order[start:start + config.batch_size]
            states = env.states_for(rows)
            p = np.clip(agent.actor.forward(states), P_MIN, P_MAX)
            bits = sample_action(p, rng)
            d = bits.sum(axis=1)
            correct = env.evaluate(rows, bits)
            r = rewards(rcfg, correct, d, n)
            v = agent.critic.forward(states)[:, 0]
            # single-step episodes: there is no successor state
            v_next = np.zeros_like(v)
            adv = r + config.gamma * v_next - v
            if config.audit:
                agent.audit_log.extend(
                    AdvantageRecord(float(r[i]), float(v[i]), float(v_next[i]),
                                    config.gamma, float(adv[i]))
                    for i in range(len(rows)))
            update(agent, states, bits, adv, context={"epoch": epoch, "sample": int(rows[0])})
            raw_sum += float(r.sum())
            hits += int(correct.sum())
            active += int(d.sum())
        mean_raw = raw_sum / count
        record = EpochRecord(
            epoch=epoch,
            mean_reward_raw=mean_raw,
            mean_reward_normalized=float(rcfg.normalize(mean_raw, n)),
            train_accuracy=hits / count,
            comm_overhead_fraction=active / (count * n),
        )
        history.append(record)
        if on_epoch is not None:
            on_epoch(record, agent)
    return history


class FrozenEnv:
    """Agent-facing view of a pretrained, frozen environment over one set of scenes.

    States and the classifier's correctness under every mask are computed once,
    so a training step is a table lookup instead of a cloud forward pass.
    """

    def __init__(self, states, outcomes):
        self.states = states
        self.outcomes = outcomes
        self.weights = 1 << np.arange(states.shape[1], dtype=np.int64)

    @classmethod
    def from_environment(cls, environment, views, labels):
        features, states = environment.observe(views)
        return cls(states, environment.outcome_table(features, labels))

    @property
    def n_scenes(self):
        return len(self.states)

    def states_for(self, rows):
        return self.states[rows]

    def evaluate(self, rows, masks):
        idx = np.asarray(masks, dtype=np.int64) @ self.weights
        return self.outcomes[rows, idx]


class LiveEnv:
    """Runs sensors and cloud for every step; optionally keeps fine-tuning them.

    With ``finetune`` the sensor and cloud nets take a supervised step on each
    sampled mask, so states are recomputed from the images every time.
    """

    def __init__(self, environment, views, labels, finetune=False, learning_rate=1e-3):
        self.environment = environment
        self.views = views
        self.labels = labels
        self.finetune = finetune
        self.optimizer = nn.Optimizer("adam", learning_rate)

    @property
    def n_scenes(self):
        return len(self.views)

    def states_for(self, rows):
        _, states = self.environment.observe(self.views[rows])
        return states

    def evaluate(self, rows, masks):
        features, _ = self.environment.observe(self.views[rows])
        pred = self.environment.predict(features, masks)
        correct = pred == self.labels[rows]
        live = np.asarray(masks).any(axis=1)
        if self.finetune and live.any():
            sel = np.asarray(rows)[live]
            self.environment.train_step(self.views[sel], self.labels[sel],
                                        np.asarray(masks)[live], self.optimizer)
        return correct
