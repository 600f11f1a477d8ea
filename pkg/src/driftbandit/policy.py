"""Sliding-window UCB policies, window-size rules and adversarial baselines.

Every policy follows the same small protocol used by :func:`driftbandit.sim.run_episode`:

* ``reset(rng)`` starts a fresh episode (the only source of policy randomness);
* ``select(t, D)`` returns the index of the chosen row of the decision-set array
  ``D`` (semi-bandit policies return the tuple of chosen items instead);
* ``update(action, feedback)`` consumes the reward (a float, or an
  :class:`~driftbandit.env.Observation` for semi-bandit feedback).

``t`` is the policy's own round counter starting at 1, so a restarted policy
sees ``t = 1`` again.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .env import ActionSet, EnvironmentInstance
from .estimate import (
    LOGISTIC,
    ConfidenceConfig,
    ConvergenceError,
    ItemCounts,
    Link,
    WindowGramState,
    WindowSums,
    beta_radius,
    default_lambda,
    glm_beta,
    glm_quasi_mle,
)

__all__ = [
    "Policy",
    "SWUCB",
    "DArmedSWUCB",
    "GLMSWUCB",
    "SemiBanditSWUCB",
    "Exp3",
    "Exp3S",
    "RestartedExp3",
    "WindowChoice",
    "swucb_select",
    "tuned_window",
    "opt_window_logfactor",
    "baseline_stationary_ucb",
    "baseline_exp3",
    "baseline_exp3s",
    "make_swucb",
    "top_m_select",
    "enumerate_select",
]


class Policy:
    name = "policy"
    setting = "linear"

    def reset(self, rng: np.random.Generator | None = None) -> None:
        raise NotImplementedError

    def select(self, t: int, D):
        raise NotImplementedError

    def update(self, action, feedback) -> None:
        raise NotImplementedError


def swucb_select(policy: Policy, t: int, D):
    """Pick the action with the highest upper confidence bound in ``D``."""
    if D is not None and not isinstance(D, ActionSet) and len(D) == 0:
        raise ValueError("empty decision set")
    return policy.select(t, D)


# --------------------------------------------------------------------------- linear


class SWUCB(Policy):
    """SW-UCB on the ridge estimate of the last ``window`` observations.

    With ``basis=True`` the decision set must be the standard basis. ``V`` is then
    diagonal and the policy keeps per-arm window counts and sums in plain Python,
    which computes the same estimate and widths at a fraction of the cost.
    """

    setting = "linear"

    def __init__(self, d: int, window: int, T: int, R: float = 0.1, L: float = 1.0, S: float = 1.0,
                 lam: float | None = None, delta: float | None = None, beta: float | None = None,
                 basis: bool = False, name: str = "SW-UCB"):
        self.d = d
        self.window = max(1, int(window))
        self.T = T
        self.lam = default_lambda(S) if lam is None else float(lam)
        self.delta = 1.0 / T if delta is None else delta
        self.cfg = ConfidenceConfig(R=R, L=L, S=S, delta=self.delta, lam=self.lam)
        self.beta = beta_radius(self.cfg, self.window, d) if beta is None else float(beta)
        self.basis = basis
        self.name = name
        self.reset()

    def reset(self, rng=None):
        if self.basis:
            self._counts = [0] * self.d
            self._sums = WindowSums(self.d)
            self._arms: deque = deque()
        else:
            self.state = WindowGramState(self.d, self.window, self.lam)
        self._D = None

    def theta_hat(self) -> np.ndarray:
        if self.basis:
            tot = self._sums.totals()
            return np.array([s / (self.lam + n) for s, n in zip(tot, self._counts)])
        return self.state.theta()

    def select(self, t, D):
        if self.basis:
            tot = self._sums.totals()
            lam, beta = self.lam, self.beta
            best, arg = -math.inf, 0
            for i, n in enumerate(self._counts):
                v = lam + n
                s = tot[i] / v + beta / math.sqrt(v)
                if s > best:
                    best, arg = s, i
            return arg
        D = np.asarray(D)
        self._D = D
        scores = D @ self.state.theta() + self.beta * self.state.widths(D)
        return int(np.argmax(scores))

    def update(self, action, feedback):
        y = float(feedback)
        if self.basis:
            self._arms.append(action)
            self._counts[action] += 1
            self._sums.push((action,), (y,))
            if len(self._arms) > self.window:
                old = self._arms.popleft()
                self._counts[old] -= 1
                self._sums.pop_oldest()
            return
        self.state.push(self._D[action], y)


# --------------------------------------------------------------------------- d-armed


class DArmedSWUCB(Policy):
    """Windowed sample means plus ``R sqrt(2 ln(2dT^2)/N)``; unpulled arms go first."""

    setting = "d-armed"

    def __init__(self, d: int, window: int, T: int, R: float = 0.1, name: str = "SW-UCB(d-armed)"):
        self.d = d
        self.window = max(1, int(window))
        self.T = T
        self.R = R
        self.name = name
        self._c = R * math.sqrt(2.0 * math.log(2.0 * d * T * T))
        self.reset()

    def reset(self, rng=None):
        self.counts = ItemCounts(self.d, self.window)

    def select(self, t, D):
        counts = self.counts.counts
        for i, n in enumerate(counts):
            if n == 0:
                return i
        tot = self.counts.totals()
        c = self._c
        best, arg = -math.inf, 0
        for i, n in enumerate(counts):
            s = tot[i] / n + c / math.sqrt(n)
            if s > best:
                best, arg = s, i
        return arg

    def update(self, action, feedback):
        self.counts.push((action,), (float(feedback),))


# --------------------------------------------------------------------------- GLM


def _spanning_rows(D: np.ndarray) -> list:
    d = D.shape[1]
    eye_rows = []
    for j in range(d):
        hit = np.flatnonzero(np.all(D == np.eye(d)[j], axis=1))
        if len(hit) == 0:
            break
        eye_rows.append(int(hit[0]))
    if len(eye_rows) == d:
        return eye_rows
    chosen: list = []
    for k in range(len(D)):
        if np.linalg.matrix_rank(D[chosen + [k]]) > len(chosen):
            chosen.append(k)
        if len(chosen) == d:
            return chosen
    raise ValueError("decision set does not span R^d; GLM forced exploration impossible")


class GLMSWUCB(Policy):
    """SW-UCB for a generalized linear reward with a windowed quasi-MLE.

    Rounds ``t`` with ``(t - 1) mod P < d`` (``P = max(window, d)``) play the
    spanning actions ``a_1..a_d`` in order so the windowed design stays invertible.
    """

    setting = "glm"

    def __init__(self, D: np.ndarray, window: int, T: int, link: Link = LOGISTIC, L: float = 1.0,
                 S: float = 1.0, y_max: float = 1.0, c_mu: float | None = None, beta: float | None = None,
                 explore: list | None = None, name: str = "SW-UCB(GLM)"):
        self.D = np.asarray(D, dtype=float)
        self.d = self.D.shape[1]
        self.window = max(1, int(window))
        self.T = T
        self.link = link
        self.S = S
        self.explore = list(explore) if explore is not None else _spanning_rows(self.D)
        A = self.D[self.explore]
        self.lam0 = float(np.linalg.eigvalsh(A.T @ A).min())
        self.c_mu = link.c_mu(L * S) if c_mu is None else c_mu
        if beta is None:
            beta = 0.0 if self.window < 2 else glm_beta(link.lipschitz, self.c_mu, y_max, self.d, self.window, L, self.lam0, T)
        self.beta = beta
        self.period = max(self.window, self.d)
        self.name = name
        self.reset()

    def reset(self, rng=None):
        self.state = WindowGramState(self.d, self.window, lam=0.0)
        self.theta = np.zeros(self.d)
        self.n_nonconverged = 0
        self.n_outside_ball = 0

    def _estimate(self):
        X = np.array([x for x, _ in self.state.buffer])
        y = np.array([v for _, v in self.state.buffer])
        try:
            self.theta = glm_quasi_mle(X, y, self.link, theta0=self.theta, allow_rank_deficient=True)
        except ConvergenceError as err:
            self.n_nonconverged += 1
            self.theta = err.theta
        if np.linalg.norm(self.theta) > self.S:
            self.n_outside_ball += 1

    def select(self, t, D):
        r = (t - 1) % self.period
        if r < self.d:
            return self.explore[r]
        self._estimate()
        scores = self.D @ self.theta + self.beta * self.state.widths(self.D)
        return int(np.argmax(scores))

    def update(self, action, feedback):
        self.state.push(self.D[action], float(feedback))


# --------------------------------------------------------------------------- semi-bandit


def top_m_select(scores, m: int, exact: bool = False) -> tuple:
    """Maximize ``sum_i x(i) score(i)`` over subsets of size <= m (or == m).

    Lowest item index wins ties. For the ``<= m`` family only positive scores are
    taken, falling back to the single best item when none is positive.
    """
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    if exact:
        return tuple(sorted(order[:m]))
    picked = [i for i in order[:m] if scores[i] > 0]
    return tuple(sorted(picked or order[:1]))


def enumerate_select(family: np.ndarray, scores) -> tuple:
    """Brute-force argmax over the rows of an explicit 0/1 family (first row wins ties)."""
    vals = family @ np.asarray(scores, dtype=float)
    k = int(np.argmax(vals))
    return tuple(int(i) for i in np.flatnonzero(family[k]))


class SemiBanditSWUCB(Policy):
    """Per-item window means plus ``4R sqrt(ln(2dT^2)/(N+1))``, maximized over the family."""

    setting = "semi-bandit"

    def __init__(self, family: ActionSet, window: int, T: int, R: float = 0.5, name: str = "SW-UCB(semi)"):
        if family.kind != "combinatorial":
            raise ValueError("semi-bandit policies need a combinatorial family")
        self.family = family
        self.d = family.dim
        self.m = family.max_items
        self.window = max(1, int(window))
        self.T = T
        self.R = R
        self.name = name
        self._c = 4.0 * R * math.sqrt(math.log(2.0 * self.d * T * T))
        self.reset()

    def reset(self, rng=None):
        self.counts = ItemCounts(self.d, self.window)

    def scores(self) -> list:
        tot = self.counts.totals()
        c = self._c
        return [s / max(n, 1) + c / math.sqrt(n + 1) for s, n in zip(tot, self.counts.counts)]

    def select(self, t, D=None):
        sc = self.scores()
        fam = self.family
        if fam.subset_rule is not None:
            return top_m_select(sc, fam.max_items, fam.subset_rule == "exactly")
        if fam.is_fixed:
            return enumerate_select(fam.at(1), sc)
        if D is None:
            raise ValueError("semi-bandit family varies per round but no decision set was passed")
        return enumerate_select(np.asarray(D), sc)

    def update(self, action, feedback):
        self.counts.push(feedback.items, feedback.item_rewards)


# --------------------------------------------------------------------------- EXP3 family


class _Uniforms:
    """Batched uniform draws; a policy asks for one per round."""

    def __init__(self, rng, batch=4096):
        self.rng = rng
        self.batch = batch
        self._buf = []
        self._i = 0

    def __call__(self) -> float:
        if self._i >= len(self._buf):
            self._buf = self.rng.random(self.batch).tolist()
            self._i = 0
        u = self._buf[self._i]
        self._i += 1
        return u


def _sample(probs, u) -> int:
    acc = 0.0
    for k, p in enumerate(probs):
        acc += p
        if u < acc:
            return k
    return len(probs) - 1


class Exp3(Policy):
    """EXP3 over ``K`` arms with mixing ``gamma``; rewards are clipped to [0, 1].

    Weights are stored as logs so long runs cannot overflow.
    """

    setting = "d-armed"

    def __init__(self, K: int, gamma: float, name: str = "EXP3"):
        if K < 2:
            raise ValueError("EXP3 needs K >= 2")
        self.K = K
        self.gamma = min(1.0, float(gamma))
        self.name = name
        self.reset()

    def reset(self, rng=None):
        self.rng = np.random.default_rng(rng)
        self._u = _Uniforms(self.rng)
        self.log_w = [0.0] * self.K
        self._p = None
        self.n_clipped = 0

    def probabilities(self) -> list:
        mx = max(self.log_w)
        w = [math.exp(v - mx) for v in self.log_w]
        s = sum(w)
        g = self.gamma
        return [(1.0 - g) * x / s + g / self.K for x in w]

    def select(self, t, D=None):
        self._p = self.probabilities()
        return _sample(self._p, self._u())

    def update(self, action, feedback):
        x = float(feedback)
        if not 0.0 <= x <= 1.0:
            self.n_clipped += 1
            x = min(max(x, 0.0), 1.0)
        self.log_w[action] += self.gamma * (x / self._p[action]) / self.K


class RestartedExp3(Exp3):
    """EXP3 restarted every ``batch`` rounds (the Rexp3 scheme)."""

    def __init__(self, K: int, gamma: float, batch: int, name: str = "Rexp3"):
        self.batch = max(1, int(batch))
        super().__init__(K, gamma, name)

    def select(self, t, D=None):
        if (t - 1) % self.batch == 0:
            self.log_w = [0.0] * self.K
        return super().select(t, D)


class Exp3S(Exp3):
    """EXP3.S: EXP3 plus a per-round uniform weight share ``alpha``."""

    def __init__(self, K: int, gamma: float, alpha: float, name: str = "EXP3.S"):
        self.alpha = float(alpha)
        super().__init__(K, gamma, name)

    def reset(self, rng=None):
        super().reset(rng)
        self.w = [1.0 / self.K] * self.K

    def probabilities(self) -> list:
        s = sum(self.w)
        g = self.gamma
        return [(1.0 - g) * x / s + g / self.K for x in self.w]

    def update(self, action, feedback):
        x = float(feedback)
        if not 0.0 <= x <= 1.0:
            self.n_clipped += 1
            x = min(max(x, 0.0), 1.0)
        K, w = self.K, self.w
        total = sum(w)
        share = math.e * self.alpha / K * total
        w[action] *= math.exp(self.gamma * (x / self._p[action]) / K)
        new = [v + share for v in w]
        s = sum(new)
        self.w = [v / s for v in new]


def baseline_exp3(K: int, T: int, rng=None) -> Exp3:
    """EXP3 with the horizon-tuned mixing ``min(1, sqrt(K ln K / ((e-1) T)))``."""
    p = Exp3(K, math.sqrt(K * math.log(K) / ((math.e - 1) * T)))
    p.reset(rng)
    return p


def baseline_exp3s(K: int, T: int, B_T: float, rng=None, variant: str = "restart") -> Exp3:
    """Variation-budget-tuned adversarial baseline.

    ``variant="restart"`` restarts EXP3 in batches of
    ``ceil((K ln K)^{1/3} (T/B_T)^{2/3})`` rounds with mixing
    ``sqrt(K ln K / ((e-1) batch))``; ``variant="share"`` is EXP3.S with
    ``alpha = 1/T`` and ``gamma = (2 B_T K ln(KT) / ((e-1)^2 T))^{1/3}``.
    """
    if variant == "restart":
        batch = math.ceil((K * math.log(K)) ** (1 / 3) * (T / B_T) ** (2 / 3))
        batch = min(batch, T)
        gamma = math.sqrt(K * math.log(K) / ((math.e - 1) * batch))
        p = RestartedExp3(K, gamma, batch, name="EXP3.S")
    elif variant == "share":
        gamma = (2.0 * B_T * K * math.log(K * T) / ((math.e - 1) ** 2 * T)) ** (1 / 3)
        p = Exp3S(K, gamma, 1.0 / T, name="EXP3.S(share)")
    else:
        raise ValueError(f"unknown EXP3.S variant {variant!r}")
    p.reset(rng)
    return p


# --------------------------------------------------------------------------- windows


@dataclass(frozen=True)
class WindowChoice:
    w: int
    rule: str
    raw: float = float("nan")

    def __post_init__(self):
        if self.w < 1:
            raise ValueError("window must be >= 1")


def tuned_window(setting: str, d: int, T: int, B_T: float | None = None, m: int | None = None) -> WindowChoice:
    """Order-optimal window with unit constant; ``B_T=None`` gives the oblivious rule."""
    b = 1.0 if B_T is None else float(B_T)
    if b <= 0:
        raise ValueError("B_T must be positive")
    if setting in ("linear", "glm"):
        raw = (d * T) ** (2 / 3) * b ** (-2 / 3)
    elif setting == "d-armed":
        raw = d ** (1 / 3) * T ** (2 / 3) * b ** (-2 / 3)
    elif setting == "semi-bandit":
        if not m:
            raise ValueError("semi-bandit windows need the arm size bound m")
        raw = d ** (1 / 3) * m ** (-1 / 3) * T ** (2 / 3) * b ** (-2 / 3)
    else:
        raise ValueError(f"unknown setting {setting!r}")
    w = min(max(int(math.floor(raw)), 1), T)
    if setting == "semi-bandit":
        w = max(w, math.ceil(d / m))
    return WindowChoice(w, "oblivious" if B_T is None else "tuned-known-B", raw)


def opt_window_logfactor(d: int, T: int, B_T: float | None = None, L: float = 1.0, lam: float = 1.0,
                         S: float = 1.0, R: float = 0.1) -> WindowChoice:
    """Window minimizing the explicit linear SW-UCB bound including log factors.

    Returns ``ceil(wbar / B_T^{2/3})`` when the budget is known, else ``ceil(wbar)``.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    wbar = (
        d ** (1 / 3) * T ** (2 / 3) / (2 ** (1 / 3) * L ** (2 / 3))
        * (R * math.sqrt(d * math.log(T + T**2 * L**2 / lam)) + math.sqrt(lam) * S) ** (2 / 3)
        * math.log(1 + T * L**2 / (d * lam**2)) ** (1 / 3)
    )
    raw = wbar if B_T is None else wbar / B_T ** (2 / 3)
    w = min(max(math.ceil(raw), 1), T)
    return WindowChoice(w, "opt-logfactor", raw)


# --------------------------------------------------------------------------- builders


def make_swucb(env: EnvironmentInstance, window: int, setting: str | None = None, T: int | None = None,
               name: str | None = None, **kw) -> Policy:
    """SW-UCB of the right flavour for ``env``.

    ``setting`` defaults from the reward kind; for the standard basis it may be
    ``"linear"`` (ridge estimate) or ``"d-armed"`` (sample means).
    """
    T = env.horizon if T is None else T
    if setting is None:
        setting = {"linear": "linear", "glm-logistic": "glm", "semi-bandit": "semi-bandit"}[env.reward_kind]
    extra = {"name": name} if name else {}
    if setting == "linear":
        basis = env.actions.kind == "standard-basis"
        return SWUCB(env.dim, window, T, R=kw.pop("R", env.noise.R), L=kw.pop("L", env.actions.norm_bound),
                     S=kw.pop("S", env.path.norm_bound), basis=basis, **kw, **extra)
    if setting == "d-armed":
        if env.actions.kind != "standard-basis":
            raise ValueError("the d-armed policy needs a standard-basis action set")
        return DArmedSWUCB(env.dim, window, T, R=kw.pop("R", env.noise.R), **kw, **extra)
    if setting == "glm":
        if not env.actions.is_fixed:
            raise ValueError("GLM policies need a fixed decision set")
        return GLMSWUCB(env.actions.at(1), window, T, L=env.actions.norm_bound, S=env.path.norm_bound,
                        y_max=env.y_max, **kw, **extra)
    if setting == "semi-bandit":
        return SemiBanditSWUCB(env.actions, window, T, R=kw.pop("R", 0.5), **kw, **extra)
    raise ValueError(f"unknown setting {setting!r}")


def baseline_stationary_ucb(env: EnvironmentInstance, T: int | None = None, **kw) -> Policy:
    """The stationary UCB baseline: SW-UCB whose window is the whole horizon."""
    T = env.horizon if T is None else T
    return make_swucb(env, T, setting=kw.pop("setting", "linear"), T=T, name="UCB", **kw)
