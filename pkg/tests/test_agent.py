from fractions import Fraction
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sensordrop import nn
from sensordrop.agent import (
    P_MAX,
    P_MIN,
    Agent,
    FrozenEnv,
    RewardConfig,
    TrainConfig,
    advantage,
    build_actor,
    log_prob,
    policy_forward,
    reward,
    rewards,
    sample_action,
    train,
    update,
)
from sensordrop.env import all_masks

QUAD = RewardConfig()
HARM = RewardConfig(kind="harmonic", K=0.4)


def toy_env(n_scenes=24, n=6, seed=0):
    """States plus an outcome table where a scene is solved iff its 'good' sensor is on."""
    rng = np.random.default_rng(seed)
    states = rng.random((n_scenes, n, 16, 16))
    good = rng.integers(n, size=n_scenes)
    masks = all_masks(n)
    outcomes = masks[:, good].T.copy()
    return FrozenEnv(states, outcomes)


# ------------------------------------------------------------------- policy


def test_zero_actor_gives_half():
    actor = build_actor(6)  # no rng: all-zero weights and biases
    p = policy_forward(actor, np.random.default_rng(0).random((6, 16, 16)))
    np.testing.assert_array_equal(p, [0.5] * 6)


def test_policy_is_deterministic_and_in_range():
    actor = build_actor(6, rng=np.random.default_rng(0))
    s = np.random.default_rng(1).random((6, 16, 16))
    p1 = policy_forward(actor, s)
    assert p1.tobytes() == policy_forward(actor, s.copy()).tobytes()
    s[3] += 5.0
    p2 = policy_forward(actor, s)
    assert p2.shape == (6,)
    assert np.all((p2 >= P_MIN) & (p2 <= P_MAX))


def test_saturated_probabilities_always_transmit():
    rng = np.random.default_rng(0)
    p = np.full(6, 1.0 - 1e-12)
    hits = sum(sample_action(np.clip(p, P_MIN, P_MAX), rng).all() for _ in range(2000))
    assert hits >= 1995


def test_bernoulli_frequencies():
    rng = np.random.default_rng(0)
    draws = sample_action(np.full((100_000, 6), 0.5), rng)
    means = draws.mean(axis=0)
    assert np.all((means >= 0.49) & (means <= 0.51))


def test_greedy_threshold():
    assert list(sample_action(np.array([0.2, 0.8]), None, greedy=True)) == [False, True]


def test_log_prob_examples():
    for bits in ([0, 0], [0, 1], [1, 0], [1, 1]):
        assert log_prob([0.5, 0.5], bits) == pytest.approx(np.log(0.25), abs=1e-15)
    assert log_prob([0.9], [1]) == pytest.approx(np.log(0.9), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(P_MIN, P_MAX)))
def test_policy_normalizes_over_action_space(p):
    total = sum(np.exp(log_prob(p, bits)) for bits in product([0, 1], repeat=6))
    assert abs(total - 1.0) < 1e-9


# ------------------------------------------------------------------- reward


def quad_oracle(k1, k2, zeta, correct, d, n):
    if not correct:
        return -Fraction(zeta)
    return Fraction(k1) - Fraction(k2) * Fraction(d * d, n * n)


def harm_oracle(K, zeta_p, correct, d):
    if not correct:
        return -Fraction(zeta_p)
    return Fraction(K) + (1 - Fraction(K)) / d


def test_quadratic_anchor():
    assert reward(QUAD, True, 2, 6) == pytest.approx(188.889, abs=1e-3)
    assert reward(QUAD, True, 2, 6) == float(Fraction(200) - Fraction(100, 9))


def test_quadratic_incorrect():
    assert reward(QUAD, False, 3, 6) == -QUAD.zeta
    assert reward(RewardConfig(zeta=42.0), False, 6, 6) == -42.0


def test_harmonic_anchors():
    assert reward(HARM, True, 1, 6) == 1.0
    assert reward(HARM, False, 2, 6) == -0.75


def test_harmonic_rejects_correct_without_sensors():
    with pytest.raises(ValueError):
        reward(HARM, True, 0, 6)


@pytest.mark.parametrize("correct", [True, False])
@pytest.mark.parametrize("d", range(7))
def test_rewards_exact_against_rational_oracle(correct, d):
    assert reward(QUAD, correct, d, 6) == float(quad_oracle(200, 100, 100, correct, d, 6))
    if d >= 1 or not correct:
        assert reward(HARM, correct, d, 6) == float(harm_oracle(0.4, 0.75, correct, d))


def test_vectorised_rewards_match_scalar():
    correct = np.array([True, False] * 7)
    d = np.repeat(np.arange(7), 2)
    vec = rewards(QUAD, correct, d, 6)
    assert list(vec) == [reward(QUAD, c, k, 6) for c, k in zip(correct, d)]
    ok = d >= 1
    vec = rewards(HARM, correct[ok], d[ok], 6)
    assert list(vec) == [reward(HARM, c, k, 6) for c, k in zip(correct[ok], d[ok])]


def test_quadratic_full_set_minimum():
    assert reward(QUAD, True, 6, 6) == QUAD.k1 - QUAD.k2


@pytest.mark.parametrize("config", [QUAD, HARM, RewardConfig(kind="harmonic", K=0.0)])
def test_reward_decreases_with_active_sensors(config):
    values = [reward(config, True, d, 6) for d in range(1, 7)]
    assert all(a > b for a, b in zip(values, values[1:]))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(1, 6))
def test_harmonic_correct_range(K, d):
    cfg = RewardConfig(kind="harmonic", K=K)
    r = reward(cfg, True, d, 6)
    assert K + (1 - K) / 6 - 1e-15 <= r <= 1.0 + 1e-15


def test_normalization_maps_bounds():
    lo, hi = QUAD.bounds(6)
    assert QUAD.normalize(lo, 6) == -1.0
    assert QUAD.normalize(hi, 6) == 1.0
    assert HARM.normalize(1.0, 6) == 1.0


def test_reward_config_validation():
    with pytest.raises(ValueError):
        RewardConfig(kind="linear")
    with pytest.raises(ValueError):
        RewardConfig(kind="harmonic", K=1.5)


# ---------------------------------------------------------------- advantage


def test_advantage_examples():
    assert advantage(1.0, 0.2, 0.0, 0.99).advantage == pytest.approx(0.8)
    rec = advantage(1.0, 1.0 + 0.5 * 2.0, 2.0, 0.5)
    assert rec.advantage == 0.0
    assert advantage(3.0, 1.25, 7.0, 0.0).advantage == 3.0 - 1.25
    assert rec.holds()


# ------------------------------------------------------------------- update


def snapshot(net):
    return [p.copy() for p in net.parameters()]


def unchanged(net, snap):
    return all(np.array_equal(p, q) for p, q in zip(net.parameters(), snap))


def forward_both(agent, states):
    agent.actor.forward(states)
    agent.critic.forward(states)


def test_zero_advantage_changes_nothing():
    agent = Agent(6, rng=np.random.default_rng(0))
    states = np.random.default_rng(1).random((1, 6, 16, 16))
    a0, c0 = snapshot(agent.actor), snapshot(agent.critic)
    forward_both(agent, states)
    update(agent, states, np.ones((1, 6), dtype=bool), np.array([0.0]))
    assert unchanged(agent.actor, a0) and unchanged(agent.critic, c0)


def test_zero_alpha_freezes_actor_only():
    agent = Agent(6, config=TrainConfig(alpha=0.0), rng=np.random.default_rng(0))
    states = np.random.default_rng(1).random((1, 6, 16, 16))
    a0, c0 = snapshot(agent.actor), snapshot(agent.critic)
    forward_both(agent, states)
    update(agent, states, np.ones((1, 6), dtype=bool), np.array([2.5]))
    assert unchanged(agent.actor, a0)
    assert not unchanged(agent.critic, c0)


def test_positive_advantage_raises_single_bernoulli():
    agent = Agent(1, config=TrainConfig(optimizer="sgd", alpha=0.01),
                  rng=np.random.default_rng(0))
    state = np.random.default_rng(1).random((1, 1, 16, 16))
    p0 = policy_forward(agent.actor, state)[0, 0]
    forward_both(agent, state)
    update(agent, state, np.array([[True]]), np.array([1.0]))
    assert policy_forward(agent.actor, state)[0, 0] > p0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 50.0), st.integers(0, 63))
def test_positive_advantage_increases_log_prob(seed, adv, index):
    rng = np.random.default_rng(seed)
    agent = Agent(6, config=TrainConfig(optimizer="sgd", alpha=1e-4), rng=rng)
    state = rng.random((1, 6, 16, 16))
    bits = all_masks(6)[index][None]
    before = log_prob(policy_forward(agent.actor, state), bits)[0]
    forward_both(agent, state)
    update(agent, state, bits, np.array([adv]))
    after = log_prob(policy_forward(agent.actor, state), bits)[0]
    assert after > before


def test_critic_regresses_to_fixed_reward():
    agent = Agent(6, config=TrainConfig(beta=1e-3, alpha=0.0), rng=np.random.default_rng(0))
    state = np.random.default_rng(1).random((1, 6, 16, 16))
    target = 1.0
    errors = []
    for _ in range(10_000):
        v = agent.critic.forward(state)[0, 0]
        agent.actor.forward(state)
        errors.append(abs(target - v))
        update(agent, state, np.ones((1, 6), dtype=bool), np.array([target - v]))
        if errors[-1] < 1e-2 and len(errors) > 50:
            break
    assert errors[-1] < 1e-2
    smoothed = np.convolve(errors, np.ones(20) / 20, mode="valid")[::20]
    assert smoothed[-1] < smoothed[0]


# -------------------------------------------------------------------- train


def test_zero_epochs():
    env = toy_env()
    agent = Agent(6, config=TrainConfig(epochs=0), rng=np.random.default_rng(0))
    snap = snapshot(agent.actor)
    assert train(agent, env, rng=np.random.default_rng(0)) == []
    assert unchanged(agent.actor, snap)


def run_toy(seed=0, **kw):
    cfg = TrainConfig(epochs=3, **kw)
    agent = Agent(6, config=cfg, rng=np.random.default_rng(seed))
    return agent, train(agent, toy_env(), rng=np.random.default_rng(seed + 1))


def test_training_is_deterministic():
    a1, h1 = run_toy()
    a2, h2 = run_toy()
    assert h1 == h2
    assert all(p.tobytes() == q.tobytes()
               for p, q in zip(a1.actor.parameters(), a2.actor.parameters()))


def test_history_fields():
    _, history = run_toy()
    assert [r.epoch for r in history] == [1, 2, 3]
    for r in history:
        assert 0.0 <= r.train_accuracy <= 1.0
        assert 0.0 <= r.comm_overhead_fraction <= 1.0
        assert r.mean_reward_normalized == pytest.approx(QUAD.normalize(r.mean_reward_raw, 6))


def test_audit_log_identity():
    agent, _ = run_toy(audit=True)
    assert len(agent.audit_log) == 3 * 24
    for rec in agent.audit_log:
        assert rec.next_value == 0.0
        assert rec.advantage == rec.reward + rec.gamma * rec.next_value - rec.value


def test_minibatch_mode_runs():
    agent, history = run_toy(batch_size=8)
    assert len(history) == 3
    assert agent.actor_opt.step_count == 3 * 3


def test_empty_mask_counts_as_incorrect():
    env = toy_env()
    correct = env.evaluate(np.arange(3), np.zeros((3, 6), dtype=bool))
    assert not correct.any()


def test_nan_state_aborts_training():
    env = toy_env()
    env.states[0, 0, 0, 0] = np.nan
    agent = Agent(6, config=TrainConfig(epochs=1), rng=np.random.default_rng(0))
    with pytest.raises(nn.DivergenceError) as err:
        train(agent, env, rng=np.random.default_rng(0))
    assert err.value.diagnostics["epoch"] == 1
