import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from driftbandit.env import ActionSet, EnvironmentInstance, NoiseModel, ParameterPath, make_sinusoidal
from driftbandit.estimate import LOGISTIC
from driftbandit.policy import (
    GLMSWUCB,
    SWUCB,
    DArmedSWUCB,
    Exp3,
    RestartedExp3,
    SemiBanditSWUCB,
    baseline_exp3,
    baseline_exp3s,
    baseline_stationary_ucb,
    enumerate_select,
    make_swucb,
    opt_window_logfactor,
    swucb_select,
    top_m_select,
    tuned_window,
)
from driftbandit.env import Observation
from driftbandit.sim import run_episode

WBAR_REF = 6730.391303388110  # 40-digit mpmath evaluation


# ---------------------------------------------------------------- selection


def test_darm_unvisited_arm_first():
    p = DArmedSWUCB(3, 10, 100)
    for _ in range(5):
        p.update(0, 1.0)
    assert p.select(6, np.eye(3)) == 1
    p.update(1, 0.0)
    assert p.select(7, np.eye(3)) == 2


def test_linear_pure_exploitation():
    p = SWUCB(2, 10, 100, beta=0.0, lam=1e-9)
    D = np.eye(2)
    p.select(1, D)
    p.update(0, 1.0)
    np.testing.assert_allclose(p.theta_hat(), [1.0, 0.0], atol=1e-8)
    assert p.select(2, D) == 0


def test_empty_decision_set_rejected():
    with pytest.raises(ValueError):
        swucb_select(SWUCB(2, 5, 10), 1, np.zeros((0, 2)))


def test_semibandit_top_m_example():
    assert top_m_select([3, 1, 2, 0], 2, exact=True) == (0, 2)
    fam = ActionSet.subsets(4, 2, exact=True).at(1)
    assert enumerate_select(fam, [3, 1, 2, 0]) == (0, 2)


def test_top_m_at_most_uses_positive_scores_only():
    assert top_m_select([-1.0, 0.5, -0.2, 2.0], 3) == (1, 3)
    assert top_m_select([-1.0, -0.5, -0.2], 2) == (2,)


@given(st.integers(1, 12).flatmap(lambda d: st.tuples(
    st.just(d), st.integers(1, d), st.booleans(),
    st.lists(st.integers(-20, 20), min_size=d, max_size=d))))
def test_top_m_matches_enumeration(case):
    d, m, exact, ints = case
    scores = [v / 4 for v in ints]  # grid values make ties likely
    fam = ActionSet.subsets(d, m, exact=exact).at(1)
    fast = top_m_select(scores, m, exact)
    brute = enumerate_select(fam, scores)
    s = np.asarray(scores)
    assert s[list(fast)].sum() == s[list(brute)].sum()
    if len(set(ints)) == d and 0 not in ints:
        assert fast == brute


@given(st.lists(st.integers(-40, 40), min_size=4, max_size=8), st.integers(-400, 400))
def test_argmax_invariant_to_constant_shift(ints, k):
    # quarter-grid values keep the shift exact in floating point
    scores, c = [v / 4 for v in ints], k / 4
    m = 2
    fam = ActionSet.subsets(len(scores), m, exact=True).at(1)
    shifted = [s + c for s in scores]
    a, b = enumerate_select(fam, scores), enumerate_select(fam, shifted)
    s = np.asarray(scores)
    assert a == b
    D = np.eye(len(scores))
    assert int(np.argmax(D @ s)) == int(np.argmax(D @ s + c))


def _feed(policy, history, D):
    for t, (a, y) in enumerate(history, start=1):
        policy.select(t, D)
        policy.update(a, y)


@pytest.mark.parametrize("kind", ["darm", "basis", "generic"])
def test_depends_only_on_windowed_history(kind):
    w, d = 15, 3
    rng = np.random.default_rng(0)
    prefix = [(int(rng.integers(d)), float(rng.normal())) for _ in range(40)]
    perm = [prefix[i] for i in rng.permutation(len(prefix))]
    suffix_noise = rng.normal(size=200) * 0.1
    means = [0.2, 0.5, 0.4]
    D = np.eye(d)

    def make():
        if kind == "darm":
            return DArmedSWUCB(d, w, 1000)
        return SWUCB(d, w, 1000, basis=(kind == "basis"))

    runs = []
    for pre in (prefix, perm):
        p = make()
        # the window after the prefix must be the same multiset: keep the last w fixed
        _feed(p, pre[:-w] + prefix[-w:], D)
        acts = []
        for k, z in enumerate(suffix_noise):
            a = p.select(len(pre) + k + 1, D)
            p.update(a, means[a] + z)
            acts.append(a)
        runs.append(acts)
    assert runs[0] == runs[1]


def test_basis_fast_path_matches_generic():
    env = make_sinusoidal(3000, 2.0)
    a = run_episode(env, SWUCB(2, 200, 3000, basis=True), 3)
    b = run_episode(env, SWUCB(2, 200, 3000, basis=False), 3)
    assert a.actions == b.actions


# ---------------------------------------------------------------- GLM and semi-bandit policies


def test_glm_forced_exploration_schedule():
    D = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]])
    p = GLMSWUCB(D, 5, 100, link=LOGISTIC)
    chosen = []
    for t in range(1, 13):
        a = p.select(t, D)
        p.update(a, 0.5)
        chosen.append(a)
    assert chosen[0:2] == [0, 1] and chosen[5:7] == [0, 1] and chosen[10:12] == [0, 1]


def test_glm_policy_runs_on_logistic_env():
    D = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    th = np.tile([0.8, -0.3], (400, 1))
    env = EnvironmentInstance(ParameterPath(th), ActionSet.finite(D), NoiseModel(0.1), reward_kind="glm-logistic")
    tr = run_episode(env, make_swucb(env, 100), 0)
    assert tr.final_regret >= 0
    assert np.mean(np.array(tr.actions[200:]) == 0) > 0.5


def test_semibandit_policy_updates_items():
    fam = ActionSet.subsets(4, 2, exact=True)
    p = SemiBanditSWUCB(fam, 10, 100)
    items = p.select(1)
    assert len(items) == 2
    p.update(items, Observation(1.0, items, (1.0, 0.0)))
    assert p.counts.counts[items[0]] == 1


# ---------------------------------------------------------------- windows


def test_tuned_window_examples():
    assert tuned_window("linear", 2, 10**5, 1.0).w == 3419
    assert tuned_window("d-armed", 2, 10**5, 1.0).w == 2714
    assert tuned_window("glm", 2, 10**5, 1.0).w == 3419


@pytest.mark.parametrize("setting", ["linear", "d-armed", "semi-bandit"])
def test_budget_times_eight_quarters_raw_window(setting):
    a = tuned_window(setting, 3, 10**6, 1.5, m=2)
    b = tuned_window(setting, 3, 10**6, 12.0, m=2)
    assert b.raw == pytest.approx(a.raw / 4, rel=1e-14)


@given(st.sampled_from(["linear", "d-armed", "glm", "semi-bandit"]), st.integers(1, 20),
       st.integers(1, 10**7), st.one_of(st.none(), st.floats(1e-3, 1e6)), st.integers(1, 20))
def test_tuned_window_bounds(setting, d, T, B, m):
    m = min(m, d)
    w = tuned_window(setting, d, T, B, m=m).w
    if setting == "semi-bandit":
        assert w >= math.ceil(d / m)
        assert w <= max(T, math.ceil(d / m))
    else:
        assert 1 <= w <= T


def test_opt_window_reference():
    c = opt_window_logfactor(2, 10**5, None, L=1, lam=1, S=1, R=0.1)
    assert c.raw == pytest.approx(WBAR_REF, rel=1e-12)
    assert c.w == 6731
    assert opt_window_logfactor(2, 10**5, 1.0).w == c.w
    ws = [opt_window_logfactor(2, 10**5, b).w for b in (0.5, 1, 2, 4, 16, 100)]
    assert all(b <= a for a, b in zip(ws, ws[1:]))


# ---------------------------------------------------------------- baselines


def test_stationary_ucb_never_evicts():
    env = make_sinusoidal(500, 1.0)
    p = baseline_stationary_ucb(env)
    assert p.window == 500 and p.name == "UCB"
    run_episode(env, p, 0)
    assert len(p._arms) == 500


def test_stationary_ucb_matches_swucb_with_large_window():
    th = np.tile([0.3, 0.6], (800, 1))
    env = EnvironmentInstance(ParameterPath(th), ActionSet.standard_basis(2), NoiseModel(0.1))
    a = run_episode(env, baseline_stationary_ucb(env), 5)
    b = run_episode(env, SWUCB(2, 800, 800, basis=True), 5)
    assert a.actions == b.actions


def test_exp3_probability_invariants():
    p = Exp3(4, 0.2)
    p.reset(np.random.default_rng(0))
    np.testing.assert_allclose(p.probabilities(), 0.25)
    rng = np.random.default_rng(1)
    for t in range(1, 500):
        a = p.select(t, None)
        before = list(p.log_w)
        p.update(a, rng.random())
        pr = p.probabilities()
        assert abs(sum(pr) - 1) <= 1e-12 and min(pr) >= 0.2 / 4 - 1e-12
        assert all(p.log_w[k] == before[k] for k in range(4) if k != a)


def test_exp3s_variants():
    r = baseline_exp3s(2, 240_000, 1.0)
    assert isinstance(r, RestartedExp3) and r.name == "EXP3.S"
    batch = math.ceil((2 * math.log(2)) ** (1 / 3) * 240_000 ** (2 / 3))
    assert r.batch == batch
    assert r.gamma == pytest.approx(math.sqrt(2 * math.log(2) / ((math.e - 1) * batch)))
    s = baseline_exp3s(3, 10_000, 2.0, variant="share")
    assert s.alpha == 1e-4
    rng = np.random.default_rng(0)
    for t in range(1, 200):
        a = s.select(t)
        s.update(a, rng.random())
        pr = s.probabilities()
        assert abs(sum(pr) - 1) <= 1e-12 and min(pr) >= s.gamma / 3 - 1e-12
    with pytest.raises(ValueError):
        baseline_exp3s(2, 100, 1.0, variant="other")
    assert baseline_exp3(2, 100).gamma == pytest.approx(math.sqrt(2 * math.log(2) / ((math.e - 1) * 100)))


def test_make_swucb_rejects_darm_on_general_set():
    env = EnvironmentInstance(ParameterPath(np.array([[0.1, 0.1]])), ActionSet.finite([[0.6, 0.8]]))
    with pytest.raises(ValueError):
        make_swucb(env, 5, setting="d-armed")
