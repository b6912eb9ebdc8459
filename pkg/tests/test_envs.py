import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abnvar.envs import (CatchEnv, ChainEnv, ChainMdp, FixedStateBandit, GridCollectEnv, NoiseSpec,
                         catch_random_policy_return, make_env, noisy_reward, value_iteration_oracle)
from abnvar.nn import ContractError

# -- noise -----------------------------------------------------------------------


def test_zero_noise_is_identity():
    rng = np.random.default_rng(0)
    state = rng.bit_generator.state
    for r in (0.0, 1.0, -0.3, 1e9):
        assert noisy_reward(r, NoiseSpec(0.0), rng) == r
    assert rng.bit_generator.state == state  # no draws consumed


def test_negative_variance_rejected():
    with pytest.raises(ValueError):
        NoiseSpec(-0.1)
    with pytest.raises(ValueError):
        NoiseSpec(float("nan"))


@pytest.mark.parametrize("sigma2", [0.03, 0.05])
def test_noise_moments(sigma2):
    n = 100_000
    rng = np.random.default_rng(42)
    draws = np.array([noisy_reward(0.0, NoiseSpec(sigma2), rng) for _ in range(n)])
    assert abs(draws.mean()) <= 3 * np.sqrt(sigma2 / n)
    assert abs(draws.var(ddof=1) / sigma2 - 1) <= 0.05


def test_nonzero_only_gating():
    rng = np.random.default_rng(1)
    spec = NoiseSpec(0.05, nonzero_only=True)
    assert noisy_reward(0.0, spec, rng) == 0.0
    assert noisy_reward(1.0, spec, rng) != 1.0


# -- catch -----------------------------------------------------------------------


def _catch_episode(env, policy):
    obs, frames, rewards = env.reset(), [], []
    frames.append(obs)
    done = False
    while not done:
        obs, r, done = env.step(policy(env))
        frames.append(obs)
        rewards.append(r)
    return frames, rewards


def test_catch_paddle_under_ball_pays_one():
    env = CatchEnv(7, 7, seed=3)
    for _ in range(20):
        _, rewards = _catch_episode(env, lambda e: e.greedy_action())
        assert env.last_true_reward == 1.0 and sum(rewards) == 1.0


def test_catch_greedy_optimal_everywhere():
    for w in (5, 7, 10):
        env = CatchEnv(w, w, seed=w)
        rets = []
        for _ in range(50):
            _catch_episode(env, lambda e: e.greedy_action())
            rets.append(env.episode_true_return)
        assert np.mean(rets) == 1.0


def test_catch_episode_length():
    env = CatchEnv(8, 6, seed=0)
    frames, rewards = _catch_episode(env, lambda e: 1)
    assert len(rewards) == 7 == env.episode_length


def test_catch_observation_pixels():
    env = CatchEnv(7, 7, seed=5)
    for _ in range(10):
        frames, _ = _catch_episode(env, lambda e: 0)
        for obs in frames[:-1]:
            assert obs.shape == (4, 7, 7)
            assert np.all((obs >= 0) & (obs <= 1))
            assert np.count_nonzero(obs[-1]) == 2
        # at a catch the ball lands on the paddle pixel
        assert np.count_nonzero(frames[-1][-1]) in (1, 2)


def test_catch_random_policy_oracle_matches_monte_carlo():
    oracle = catch_random_policy_return(5, 5)
    # brute force written independently: distribution of paddle position after 4 random moves
    probs = np.zeros(5)
    probs[2] = 1.0
    for _ in range(4):
        nxt = np.zeros(5)
        for p in range(5):
            for a in (-1, 0, 1):
                nxt[min(max(p + a, 0), 4)] += probs[p] / 3
        probs = nxt
    assert oracle == pytest.approx(probs.mean(), abs=1e-12)
    env = CatchEnv(5, 5, seed=11)
    rng = np.random.default_rng(0)
    rets = []
    for _ in range(20_000):
        _catch_episode(env, lambda e: int(rng.integers(3)))
        rets.append(env.episode_true_return)
    assert abs(np.mean(rets) - oracle) < 4 * np.sqrt(oracle * (1 - oracle) / len(rets))


def test_catch_bad_action_and_size():
    with pytest.raises(ValueError):
        CatchEnv(4, 4)
    env = CatchEnv()
    env.reset()
    with pytest.raises(ContractError):
        env.step(3)


def test_same_seed_same_trace(tmp_path):
    traces = []
    for _ in range(2):
        env = CatchEnv(7, 7, NoiseSpec(0.05), seed=[3, 1])
        env.enable_trace()
        rng = np.random.default_rng(9)
        obs_log = []
        for _ in range(5):
            frames, _ = _catch_episode(env, lambda e: int(rng.integers(3)))
            obs_log.append(np.stack(frames))
        env.write_trace(tmp_path / "t.csv")
        traces.append(((tmp_path / "t.csv").read_text(), np.concatenate(obs_log)))
    assert traces[0][0] == traces[1][0]
    assert np.array_equal(traces[0][1], traces[1][1])


def test_training_interface_hides_true_reward():
    env = CatchEnv(7, 7, NoiseSpec(0.05), seed=1)
    env.reset()
    out = env.step(1)
    assert len(out) == 3 and out[1] != env.last_true_reward


# -- grid collect ----------------------------------------------------------------


def test_grid_goal_adjacent_optimal_step():
    env = GridCollectEnv(6, layout={"start": (2, 2), "goal": (2, 3), "pellets": []})
    env.reset()
    _, r, done = env.step(3)
    assert r == 1.0 and done and env.episode_true_return == 1.0


def test_grid_step_limit_terminates():
    env = GridCollectEnv(6, step_limit=4, layout={"start": (0, 0), "goal": (5, 5), "pellets": []})
    env.reset()
    dones = [env.step(0)[2] for _ in range(4)]
    assert dones == [False, False, False, True]


def test_grid_pellets_collected_once():
    env = GridCollectEnv(6, layout={"start": (0, 0), "goal": (5, 5), "pellets": [(0, 1)]})
    env.reset()
    assert env.step(3)[1] == pytest.approx(0.1)
    assert env.step(2)[1] == 0.0
    assert env.step(3)[1] == 0.0


@pytest.mark.parametrize("layout_seed", [0, 1, 2])
def test_grid_value_iteration_matches_rollout(layout_seed):
    env = GridCollectEnv(6, n_pellets=2, step_limit=200, layout_seed=layout_seed)
    mdp = env.tabular_mdp(gamma=0.95)
    v, policy = value_iteration_oracle(mdp, tol=1e-12)
    env.reset()
    ret, disc, done = 0.0, 1.0, False
    while not done:
        _, r, done = env.step(int(policy[env.state_index()]))
        ret += disc * r
        disc *= 0.95
    assert ret == pytest.approx(v[mdp.start], abs=1e-9)


# -- chain MDP / value iteration -------------------------------------------------


def test_vi_single_absorbing():
    mdp = ChainMdp(np.ones((1, 1, 1)), np.zeros((1, 1)), 0.9)
    assert value_iteration_oracle(mdp)[0][0] == 0.0


def test_vi_two_state_chain():
    v, _ = value_iteration_oracle(ChainMdp.two_state(0.99), tol=1e-12)
    np.testing.assert_allclose(v, [1.0, 0.0], atol=1e-12)


def test_vi_self_loop_geometric():
    mdp = ChainMdp(np.ones((1, 1, 1)), np.ones((1, 1)), 0.9)
    assert value_iteration_oracle(mdp, tol=1e-10)[0][0] == pytest.approx(10.0, abs=1e-9)


def test_vi_rejects_bad_rows():
    with pytest.raises(ContractError):
        ChainMdp(np.full((2, 1, 2), 0.7), np.zeros((2, 1)))


@given(st.integers(0, 2**31), st.integers(2, 5), st.integers(1, 3), st.sampled_from([0.5, 0.9, 0.99]))
@settings(max_examples=40)
def test_vi_satisfies_bellman(seed, n, a, gamma):
    rng = np.random.default_rng(seed)
    P = rng.random((n, a, n))
    P /= P.sum(axis=2, keepdims=True)
    R = rng.normal(size=(n, a))
    mdp = ChainMdp(P, R, gamma)
    v, pi = value_iteration_oracle(mdp, tol=1e-10)
    q = R + gamma * P @ v
    np.testing.assert_allclose(v, q.max(axis=1), atol=1e-9)
    # brute-force policy evaluation over every deterministic policy
    best = -np.inf
    for choice in itertools.product(range(a), repeat=n):
        Pp = P[np.arange(n), choice]
        vp = np.linalg.solve(np.eye(n) - gamma * Pp, R[np.arange(n), choice])
        best = max(best, vp[0])
    assert v[0] == pytest.approx(best, abs=1e-8)


def test_chain_env_episode():
    env = ChainEnv(ChainMdp.two_state(), seed=0)
    obs = env.reset()
    assert np.array_equal(obs, env.observation_for(0))
    obs, r, done = env.step(1)
    assert r == 1.0 and done and np.array_equal(obs[-1], env.observation_for(1)[-1])


# -- bandit ----------------------------------------------------------------------


def test_bandit_noise_free():
    env = FixedStateBandit(sigma2=0.0, mu=0.5, seed=0)
    for _ in range(10):
        env.reset()
        _, r, done = env.step(0)
        assert r == 0.5 and done


def test_bandit_empirical_variance():
    env = FixedStateBandit(sigma2=0.05, mu=0.5, seed=3)
    rewards = []
    for _ in range(20_000):
        env.reset()
        rewards.append(env.step(1)[1])
    assert np.mean(rewards) == pytest.approx(0.5, abs=3 * np.sqrt(0.05 / 20_000))
    assert np.var(rewards, ddof=1) == pytest.approx(0.05, rel=0.05)


def test_bandit_constant_observation():
    env = FixedStateBandit(seed=0)
    a = env.reset()
    b, _, _ = env.step(0)
    assert np.array_equal(a, b)


def test_make_env_registry():
    assert isinstance(make_env("catch", {"height": 7, "width": 7}, 0.03, seed=1), CatchEnv)
    assert isinstance(make_env("chain"), ChainEnv)
    assert make_env("bandit", {"mu": 0.2}, 0.01).mu == 0.2
    with pytest.raises(ValueError):
        make_env("pong")
