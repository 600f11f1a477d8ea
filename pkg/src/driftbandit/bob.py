"""Bandit-over-Bandit: EXP3 over a geometric ladder of window sizes.

The horizon is cut into blocks of ``H`` rounds. At the start of each block EXP3
samples a window from the ladder ``J``, a brand-new SW-UCB is started with it,
and at the end of the block the normalized block reward updates EXP3. No
estimator state survives a block boundary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .env import EnvironmentInstance
from .policy import Policy, make_swucb

__all__ = [
    "BobParams",
    "Exp3State",
    "BlockRecord",
    "BOB",
    "bob_params",
    "exp3_init",
    "exp3_probabilities",
    "exp3_sample_window",
    "exp3_update",
    "bob_run",
]


@dataclass(frozen=True)
class BobParams:
    setting: str
    T: int
    H: int
    delta: int
    ladder: tuple
    Q: float
    nu: float = 1.0
    R: float = 0.0

    @property
    def n_blocks(self) -> int:
        return math.ceil(self.T / self.H)

    @property
    def n_nominal(self) -> int:
        """``Delta + 1``, the ladder size before duplicates are merged."""
        return self.delta + 1


def _ladder(H: int, delta: int) -> tuple:
    if delta == 0:
        return (1,) if H == 1 else (1, H)
    vals = {int(math.floor(H ** (j / delta))) for j in range(delta + 1)}
    vals.add(H)  # guard against H**1.0 rounding below H
    vals.add(1)
    return tuple(sorted(v for v in vals if 1 <= v <= H))


def bob_params(setting: str, d: int, T: int, R: float = 0.1, m: int | None = None,
               y_max: float = 1.0, nu: float = 1.0) -> BobParams:
    """Block length, ladder and reward normalizer for a setting.

    ``linear``: ``H = floor(d sqrt(T))``; ``d-armed``/``glm``: ``floor(sqrt(dT))``;
    ``semi-bandit``: ``floor(sqrt(dT/m))``. The normalizer is
    ``2(H nu + 2R sqrt(H ln(T/sqrt(H))))`` for linear and d-armed,
    ``2 H y_max`` for GLM and ``2 H m`` for semi-bandits.
    """
    if T < 4 or d < 1:
        raise ValueError("need T >= 4 and d >= 1")
    if setting == "linear":
        H = math.floor(d * math.sqrt(T))
    elif setting in ("d-armed", "glm"):
        H = math.floor(math.sqrt(d * T))
    elif setting == "semi-bandit":
        if not m:
            raise ValueError("semi-bandit parameters need m")
        H = math.floor(math.sqrt(d * T / m))
    else:
        raise ValueError(f"unknown setting {setting!r}")
    H = min(max(H, 1), T)
    delta = math.ceil(math.log(H)) if H > 1 else 0
    if setting == "glm":
        Q = 2.0 * H * y_max
    elif setting == "semi-bandit":
        Q = 2.0 * H * m
    else:
        Q = 2.0 * (H * nu + 2.0 * R * math.sqrt(H * math.log(T / math.sqrt(H))))
    return BobParams(setting, T, H, delta, _ladder(H, delta), Q, nu, R)


@dataclass
class Exp3State:
    """EXP3 state over ladder positions; weights live in the log domain."""

    gamma: float
    log_weights: np.ndarray
    n_nominal: int
    block: int = 1
    last_j: int | None = None
    last_p: float | None = None
    last_raw_reward: float | None = None
    n_clamped: int = 0


def exp3_init(params: BobParams, T: int | None = None) -> Exp3State:
    T = params.T if T is None else T
    n = params.n_nominal
    nb = math.ceil(T / params.H)
    gamma = min(1.0, math.sqrt(n * math.log(n) / ((math.e - 1) * nb))) if n > 1 else 1.0
    return Exp3State(gamma=gamma, log_weights=np.zeros(len(params.ladder)), n_nominal=n)


def exp3_probabilities(state: Exp3State) -> np.ndarray:
    """Mixture of normalized weights and the uniform distribution over the ladder."""
    lw = state.log_weights
    w = np.exp(lw - lw.max())
    k = len(lw)
    return (1.0 - state.gamma) * w / w.sum() + state.gamma / k


def exp3_sample_window(state: Exp3State, params: BobParams, rng) -> tuple:
    """Sample a ladder position; returns ``(j, window)``."""
    p = exp3_probabilities(state)
    u = rng.random()
    j = int(min(np.searchsorted(np.cumsum(p), u, side="right"), len(p) - 1))
    state.last_j = j
    state.last_p = float(p[j])
    return j, params.ladder[j]


def exp3_update(state: Exp3State, block_reward_sum: float, params: BobParams) -> Exp3State:
    """Exponential-weights update of the sampled position with ``1/2 + sum/Q`` clamped to [0, 1]."""
    if state.last_j is None:
        raise RuntimeError("exp3_update called without a preceding exp3_sample_window")
    raw = 0.5 + block_reward_sum / params.Q
    state.last_raw_reward = raw
    r = raw
    if not 0.0 <= raw <= 1.0:
        state.n_clamped += 1
        r = min(max(raw, 0.0), 1.0)
    state.log_weights[state.last_j] += state.gamma / (state.n_nominal * state.last_p) * r
    state.last_j = None
    state.last_p = None
    state.block += 1
    return state


@dataclass(frozen=True)
class BlockRecord:
    block: int
    start: int
    length: int
    j: int
    window: int
    reward_sum: float
    norm_reward: float
    clamped: bool


class BOB(Policy):
    """Bandit-over-Bandit policy.

    ``make_sub(window)`` must return a fresh policy; it is called once per block.
    ``horizon`` is the episode length (defaults to ``params.T``); the last,
    possibly short, block is closed there.
    """

    def __init__(self, params: BobParams, make_sub: Callable[[int], Policy], name: str = "BOB",
                 horizon: int | None = None):
        self.params = params
        self.horizon = params.T if horizon is None else int(horizon)
        self.make_sub = make_sub
        self.name = name
        self.setting = params.setting
        self.reset()

    def reset(self, rng=None):
        self.rng = np.random.default_rng(rng)
        self.exp3 = exp3_init(self.params)
        self.blocks: list = []
        self.sub = None
        self._block_start = 1
        self._block_sum = 0.0
        self._j = None
        self._w = None

    def select(self, t, D):
        H = self.params.H
        if (t - 1) % H == 0:
            self._j, self._w = exp3_sample_window(self.exp3, self.params, self.rng)
            self.sub = self.make_sub(self._w)
            self.sub.reset(self.rng)
            self._block_start = t
            self._block_sum = 0.0
        self._t = t
        return self.sub.select(t - self._block_start + 1, D)

    def update(self, action, feedback):
        self.sub.update(action, feedback)
        self._block_sum += float(getattr(feedback, "reward", feedback))
        t = self._t
        if t % self.params.H == 0 or t == self.horizon:
            exp3_update(self.exp3, self._block_sum, self.params)
            raw = self.exp3.last_raw_reward
            self.blocks.append(BlockRecord(
                block=len(self.blocks) + 1, start=self._block_start, length=t - self._block_start + 1,
                j=self._j, window=self._w, reward_sum=self._block_sum,
                norm_reward=raw, clamped=not 0.0 <= raw <= 1.0,
            ))


def make_bob(env: EnvironmentInstance, setting: str | None = None, params: BobParams | None = None,
             T: int | None = None, **sub_kw) -> BOB:
    """BOB over SW-UCB sub-policies suited to ``env``."""
    T = env.horizon if T is None else T
    if setting is None:
        setting = {"linear": "linear", "glm-logistic": "glm", "semi-bandit": "semi-bandit"}[env.reward_kind]
    if params is None:
        params = bob_params(setting, env.dim, T, R=env.noise.R, m=env.actions.max_items, y_max=env.y_max)

    def make_sub(window):
        return make_swucb(env, window, setting=setting, T=T, **dict(sub_kw))

    return BOB(params, make_sub, horizon=env.horizon)


def bob_run(env: EnvironmentInstance, params: BobParams | None = None, seed=None, setting: str | None = None, **sub_kw):
    """Run BOB for a whole episode; the trace carries per-block records."""
    from .sim import run_episode

    policy = make_bob(env, setting=setting, params=params, **sub_kw)
    return run_episode(env, policy, seed)
