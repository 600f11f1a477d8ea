import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from driftbandit.env import ActionSet, EnvironmentInstance, NoiseModel, ParameterPath, make_sinusoidal, make_piecewise_linear
from driftbandit.policy import DArmedSWUCB, SWUCB, baseline_exp3s, make_swucb
from driftbandit.sim import loglog_slope, oracle_path, oracle_value, replicate, run_episode


def _stationary(theta, T, R=0.0):
    return EnvironmentInstance(ParameterPath(np.tile(theta, (T, 1))), ActionSet.standard_basis(len(theta)), NoiseModel(R))


class SinusoidFactory:
    def __init__(self, T, B):
        self.T, self.B = T, B

    def __call__(self, seed):
        return make_sinusoidal(self.T, self.B)


def swucb_factory(env):
    return make_swucb(env, 150)


def test_oracle_two_armed():
    env = _stationary([0.8, 0.2], 3)
    v, x = oracle_value(env, 1)
    assert v == 0.8 and np.array_equal(x, [1.0, 0.0])


def test_oracle_semibandit_subsets():
    th = np.array([[0.9, 0.1, 0.5, 0.4]])
    env = EnvironmentInstance(ParameterPath(th, norm_bound=2.0), ActionSet.subsets(4, 2, exact=True),
                              NoiseModel(kind="bernoulli"), reward_kind="semi-bandit")
    v, x = oracle_value(env, 1)
    assert v == pytest.approx(1.4) and np.flatnonzero(x).tolist() == [0, 2]
    assert oracle_path(env)[0] == pytest.approx(1.4)


@pytest.mark.parametrize("seed", range(100))
def test_oracle_glm_argmax_equals_linear(seed):
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(6, 3))
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    th = rng.normal(size=3)
    th /= 2 * np.linalg.norm(th)
    lin = EnvironmentInstance(ParameterPath(th[None, :]), ActionSet.finite(D))
    glm = EnvironmentInstance(ParameterPath(th[None, :]), ActionSet.finite(D), reward_kind="glm-logistic")
    assert np.array_equal(oracle_value(lin, 1)[1], oracle_value(glm, 1)[1])


def test_oracle_path_matches_pointwise():
    env = make_sinusoidal(200, 3.0)
    op = oracle_path(env)
    assert all(op[t - 1] == oracle_value(env, t)[0] for t in range(1, 201))


def test_deterministic_replay():
    env = make_sinusoidal(2000, 2.0)
    a = run_episode(env, make_swucb(env, 200), 42)
    b = run_episode(env, make_swucb(env, 200), 42)
    assert np.array_equal(a.inst_regret, b.inst_regret) and a.actions == b.actions
    c = run_episode(env, make_swucb(env, 200), 43)
    assert not np.array_equal(a.rewards, c.rewards)


def test_noiseless_greedy_zero_regret_after_sampling_each_arm():
    env = _stationary([0.3, 0.7], 100)
    tr = run_episode(env, DArmedSWUCB(2, 100, 100, R=0.0), 0)
    assert tr.actions[:2] == [0, 1]
    assert tr.inst_regret[0] == pytest.approx(0.4)
    assert np.all(tr.inst_regret[1:] == 0)


@given(st.integers(0, 10**6), st.integers(1, 300))
def test_trace_invariants(seed, w):
    env = make_sinusoidal(400, 2.0)
    tr = run_episode(env, make_swucb(env, w), seed)
    assert np.all(tr.inst_regret >= 0)
    np.testing.assert_allclose(tr.cum_regret, np.cumsum(tr.inst_regret))
    assert tr.final_regret <= 2 * env.horizon * 1.0


def test_varying_sets_and_glm_clipping():
    sets = [np.eye(2) if t % 2 else np.array([[0.6, 0.8], [1.0, 0.0], [0.0, 1.0]]) for t in range(1, 301)]
    th = np.tile([0.4, 0.1], (300, 1))
    env = EnvironmentInstance(ParameterPath(th), ActionSet.varying(sets), NoiseModel(0.1))
    tr = run_episode(env, SWUCB(2, 50, 300), 0)
    assert np.all(tr.inst_regret >= -1e-15)
    glm = EnvironmentInstance(ParameterPath(th), ActionSet.standard_basis(2), NoiseModel(0.5), reward_kind="glm-logistic")
    tr = run_episode(glm, make_swucb(glm, 50), 0)
    assert tr.n_clipped > 0
    assert np.all((tr.rewards >= 0) & (tr.rewards <= 1))


def test_semibandit_episode():
    rng = np.random.default_rng(0)
    th = rng.uniform(size=(500, 5))
    env = EnvironmentInstance(ParameterPath(th, norm_bound=3.0), ActionSet.subsets(5, 2),
                              NoiseModel(kind="bernoulli"), reward_kind="semi-bandit")
    tr = run_episode(env, make_swucb(env, 100), 1)
    assert all(1 <= len(a) <= 2 for a in tr.actions)
    assert np.all(tr.inst_regret >= -1e-12)


def test_replicate_single_rep():
    env = make_sinusoidal(1000, 1.0)
    s = replicate(env, swucb_factory, 1, base_seed=5)
    assert s.mean_final_regret == run_episode(env, swucb_factory(env), 5).final_regret
    assert math.isnan(s.stderr_final_regret)


def test_replicate_parallelism_independent():
    gen = SinusoidFactory(1500, 2.0)
    a = replicate(gen, swucb_factory, 8, base_seed=3, parallelism=1)
    b = replicate(gen, swucb_factory, 8, base_seed=3, parallelism=8)
    assert np.array_equal(a.final_regrets, b.final_regrets)
    assert a.mean_final_regret == b.mean_final_regret and a.stderr_final_regret == b.stderr_final_regret


def test_replicate_zero_noise_zero_stderr():
    env = _stationary([0.2, 0.6], 300)
    s = replicate(env, lambda e: DArmedSWUCB(2, 50, 300, R=0.0), 50)
    assert s.stderr_final_regret == 0.0


def test_replicate_rejects_zero_reps():
    with pytest.raises(ValueError):
        replicate(make_sinusoidal(10, 1.0), swucb_factory, 0)


def test_exp3s_episode_runs():
    env = make_piecewise_linear(T=2000, rng_seed=0)
    tr = run_episode(env, baseline_exp3s(2, 2000, env.budget), 0)
    assert set(tr.actions) <= {0, 1}


def test_loglog_slope_exact_power_laws():
    Ts = [30_000 * k for k in range(1, 9)]
    assert loglog_slope(Ts, [3.7 * T ** (2 / 3) for T in Ts]) == pytest.approx(2 / 3, abs=1e-10)
    assert loglog_slope(Ts, [0.1 * T for T in Ts]) == pytest.approx(1.0, abs=1e-10)
    assert loglog_slope(Ts, [5.0] * 8) == pytest.approx(0.0, abs=1e-10)


def test_loglog_slope_drops_nonpositive_and_needs_three_points():
    with pytest.warns(UserWarning):
        s = loglog_slope([10, 100, 1000, 10_000], [0.0, 100.0, 1000.0, 10_000.0])
    assert s == pytest.approx(1.0)
    with pytest.raises(ValueError):
        loglog_slope([10, 100], [1.0, 2.0])
