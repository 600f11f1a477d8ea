"""Episode execution, dynamic-regret accounting and replication statistics."""
from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .env import EnvironmentInstance, Observation, logistic
from .policy import Policy

__all__ = [
    "RegretTrace",
    "ExperimentSummary",
    "oracle_value",
    "oracle_path",
    "run_episode",
    "replicate",
    "loglog_slope",
]


@dataclass
class RegretTrace:
    """Per-round record of one episode. Regret is measured on mean rewards."""

    policy: str
    oracle: np.ndarray
    chosen_mean: np.ndarray
    rewards: np.ndarray
    actions: list
    blocks: list | None = None
    n_clipped: int = 0
    inst_regret: np.ndarray = field(init=False)
    cum_regret: np.ndarray = field(init=False)

    def __post_init__(self):
        self.inst_regret = self.oracle - self.chosen_mean
        self.cum_regret = np.cumsum(self.inst_regret)

    @property
    def horizon(self) -> int:
        return len(self.oracle)

    @property
    def final_regret(self) -> float:
        return float(self.cum_regret[-1])

    @property
    def cum_reward(self) -> np.ndarray:
        return np.cumsum(self.rewards)

    @property
    def final_reward(self) -> float:
        return float(self.rewards.sum())


def _best_subset_values(thetas: np.ndarray, m: int, exact: bool) -> np.ndarray:
    top = -np.sort(-thetas, axis=1)[:, :m]
    if exact:
        return top.sum(axis=1)
    pos = np.where(top > 0, top, 0.0).sum(axis=1)
    return np.where(top[:, 0] > 0, pos, top[:, 0])


def oracle_path(env: EnvironmentInstance) -> np.ndarray:
    """Optimal mean reward of every round, vectorized when the decision set is fixed."""
    th = env.path.thetas
    acts = env.actions
    if env.reward_kind == "semi-bandit" and acts.subset_rule is not None:
        return _best_subset_values(th, acts.max_items, acts.subset_rule == "exactly")
    if acts.is_fixed:
        vals = (th @ acts.at(1).T).max(axis=1)
    else:
        vals = np.array([(acts.at(t) @ th[t - 1]).max() for t in range(1, env.horizon + 1)])
    # the link is increasing, so the linear maximizer is also the GLM maximizer
    return logistic(vals) if env.reward_kind == "glm-logistic" else vals


def oracle_value(env: EnvironmentInstance, t: int):
    """``(value, action)`` maximizing the mean reward in round ``t``."""
    theta = env.path.at(t)
    acts = env.actions
    if env.reward_kind == "semi-bandit" and acts.subset_rule is not None:
        from .policy import top_m_select

        items = top_m_select(theta.tolist(), acts.max_items, acts.subset_rule == "exactly")
        x = np.zeros(env.dim)
        x[list(items)] = 1.0
        return float(theta[list(items)].sum()), x
    D = acts.at(t)
    vals = D @ theta
    k = int(np.argmax(vals))
    v = float(vals[k])
    if env.reward_kind == "glm-logistic":
        v = float(logistic(v))
    return v, D[k].copy()


def run_episode(env: EnvironmentInstance, policy: Policy, seed=None) -> RegretTrace:
    """Play ``policy`` against ``env`` for the full horizon.

    ``seed`` is split into independent streams for the environment noise and the
    policy's own randomness, so a trace is a pure function of ``(env, policy, seed)``.
    """
    env_ss, pol_ss = np.random.SeedSequence(seed).spawn(2)
    env_rng = np.random.default_rng(env_ss)
    policy.reset(np.random.default_rng(pol_ss))
    T = env.horizon
    th = env.path.thetas
    acts = env.actions
    actions: list = []
    rewards = np.empty(T)
    chosen = np.empty(T)
    n_clipped = 0

    if env.reward_kind == "semi-bandit":
        W = (env_rng.random((T, env.dim)) < th).astype(float).tolist()
        th_list = th.tolist()
        for t in range(1, T + 1):
            items = policy.select(t, None if acts.subset_rule is not None else acts.at(t))
            wrow = W[t - 1]
            vals = tuple(wrow[i] for i in items)
            obs = Observation(float(sum(vals)), tuple(items), vals)
            policy.update(items, obs)
            actions.append(tuple(items))
            rewards[t - 1] = obs.reward
            trow = th_list[t - 1]
            chosen[t - 1] = sum(trow[i] for i in items)
        oracle = oracle_path(env)
    else:
        noise = (env_rng.standard_normal(T) * env.noise.R).tolist()
        glm = env.reward_kind == "glm-logistic"
        y_max = env.y_max
        if acts.is_fixed:
            D = acts.at(1)
            lin = th @ D.T
            means = logistic(lin) if glm else lin
            oracle = means.max(axis=1)
            mlist = means.tolist()
            for t in range(1, T + 1):
                a = policy.select(t, D)
                m = mlist[t - 1][a]
                y = m + noise[t - 1]
                if glm and not 0.0 <= y <= y_max:
                    n_clipped += 1
                    y = min(max(y, 0.0), y_max)
                policy.update(a, y)
                actions.append(a)
                rewards[t - 1] = y
                chosen[t - 1] = m
        else:
            oracle = np.empty(T)
            for t in range(1, T + 1):
                D = acts.at(t)
                lin = D @ th[t - 1]
                means = logistic(lin) if glm else lin
                oracle[t - 1] = means.max()
                a = policy.select(t, D)
                m = float(means[a])
                y = m + noise[t - 1]
                if glm and not 0.0 <= y <= y_max:
                    n_clipped += 1
                    y = min(max(y, 0.0), y_max)
                policy.update(a, y)
                actions.append(a)
                rewards[t - 1] = y
                chosen[t - 1] = m
    return RegretTrace(
        policy=getattr(policy, "name", type(policy).__name__),
        oracle=np.asarray(oracle, dtype=float), chosen_mean=chosen, rewards=rewards,
        actions=actions, blocks=getattr(policy, "blocks", None), n_clipped=n_clipped,
    )


@dataclass
class ExperimentSummary:
    policy: str
    setting: str
    T: int
    B_T: float
    reps: int
    mean_final_regret: float
    stderr_final_regret: float
    wall_ms: float
    final_regrets: np.ndarray
    final_rewards: np.ndarray
    traces: list | None = None

    @property
    def mean_final_reward(self) -> float:
        return float(self.final_rewards.mean())


def _one_rep(args):
    env_generator, policy_factory, seed, keep = args
    env = env_generator(seed) if callable(env_generator) else env_generator
    policy = policy_factory(env)
    trace = run_episode(env, policy, seed)
    return trace.final_regret, trace.final_reward, (trace if keep else None), policy


def replicate(env_generator, policy_factory: Callable, n_reps: int, base_seed: int = 0,
              parallelism: int = 1, keep_traces: bool = False, setting: str = "",
              B_T: float = float("nan")) -> ExperimentSummary:
    """Run ``n_reps`` independent episodes; replication ``r`` uses seed ``base_seed + r``.

    ``env_generator`` is an instance or a callable ``seed -> instance``;
    ``policy_factory`` maps an instance to a fresh policy. With ``parallelism > 1``
    both must be picklable. Results do not depend on the degree of parallelism.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    start = time.perf_counter()
    jobs = [(env_generator, policy_factory, base_seed + r, keep_traces) for r in range(n_reps)]
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_one_rep, jobs))
    else:
        results = [_one_rep(j) for j in jobs]
    wall_ms = (time.perf_counter() - start) * 1e3
    finals = np.array([r[0] for r in results])
    rewards = np.array([r[1] for r in results])
    if n_reps < 2:
        stderr = float("nan")
    elif np.all(finals == finals[0]):
        stderr = 0.0  # avoid rounding residue from the mean of identical values
    else:
        stderr = float(finals.std(ddof=1) / math.sqrt(n_reps))
    first = results[0]
    env0 = env_generator(base_seed) if callable(env_generator) else env_generator
    return ExperimentSummary(
        policy=getattr(first[3], "name", "policy"),
        setting=setting or getattr(first[3], "setting", ""),
        T=env0.horizon, B_T=B_T if not math.isnan(B_T) else (env0.budget or float("nan")),
        reps=n_reps, mean_final_regret=float(finals.mean()), stderr_final_regret=stderr,
        wall_ms=wall_ms, final_regrets=finals, final_rewards=rewards,
        traces=[r[2] for r in results] if keep_traces else None,
    )


def loglog_slope(summaries_or_T: Sequence, regrets: Sequence | None = None) -> float:
    """Least-squares slope of ``ln(regret)`` against ``ln(T)``.

    Accepts a list of :class:`ExperimentSummary` or parallel ``T``/``regret``
    sequences. Nonpositive regrets are dropped with a warning.
    """
    if regrets is None:
        Ts = [s.T for s in summaries_or_T]
        regrets = [s.mean_final_regret for s in summaries_or_T]
    else:
        Ts = list(summaries_or_T)
    Ts = np.asarray(Ts, dtype=float)
    regrets = np.asarray(regrets, dtype=float)
    keep = regrets > 0
    if not keep.all():
        warnings.warn(f"dropping {int((~keep).sum())} nonpositive regret value(s) from the slope fit")
    Ts, regrets = Ts[keep], regrets[keep]
    if len(Ts) < 3:
        raise ValueError("need at least 3 grid points with positive regret")
    x, y = np.log(Ts), np.log(regrets)
    xc = x - x.mean()
    return float(xc @ (y - y.mean()) / (xc @ xc))
