"""Sliding-window estimators and confidence radii."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .env import logistic

__all__ = [
    "WindowGramState",
    "ConfidenceConfig",
    "WindowSums",
    "ItemCounts",
    "Link",
    "LOGISTIC",
    "IDENTITY",
    "SingularDesignError",
    "ConvergenceError",
    "sw_rlse",
    "beta_radius",
    "push_and_evict",
    "sw_mean_darm",
    "darm_radius",
    "semibandit_radius",
    "glm_quasi_mle",
    "glm_beta",
    "default_lambda",
]


class SingularDesignError(np.linalg.LinAlgError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, msg, theta, residual):
        super().__init__(msg)
        self.theta = theta
        self.residual = residual


def default_lambda(S: float) -> float:
    """Regularizer large enough that the radius is at least 1: ``max(1, 1/S^2)``."""
    return max(1.0, 1.0 / S**2)


class WindowGramState:
    """Ring buffer of the last ``window`` (x, y) pairs with ``V = lam*I + sum x x^T``.

    ``V_inv`` is kept current with Sherman-Morrison rank-one updates on push and
    rank-one downdates on eviction. Every ``window`` updates, and whenever a
    downdate denominator is not safely positive, ``V``, ``V_inv`` and ``xy_sum``
    are rebuilt from the buffer (Cholesky solve), which bounds floating drift.

    With ``lam == 0`` no inverse is maintained; :meth:`pinv` serves the
    pseudo-inverse on demand.
    """

    def __init__(self, dim: int, window: int, lam: float = 1.0, refresh_every: int | None = None):
        if window < 1:
            raise ValueError("window must be >= 1")
        if lam < 0:
            raise ValueError("lam must be nonnegative")
        self.dim = dim
        self.window = int(window)
        self.lam = float(lam)
        self.refresh_every = int(refresh_every or window)
        self.buffer: deque = deque()
        self.V = self.lam * np.eye(dim)
        self.V_inv = np.eye(dim) / self.lam if self.lam > 0 else None
        self.xy_sum = np.zeros(dim)
        self.n_refresh = 0
        self._since_refresh = 0

    def __len__(self):
        return len(self.buffer)

    def push(self, x, y: float) -> None:
        x = np.asarray(x, dtype=float)
        y = float(y)
        self.buffer.append((x, y))
        self.V += np.outer(x, x)
        self.xy_sum += y * x
        ok = True
        if self.V_inv is not None:
            u = self.V_inv @ x
            self.V_inv -= np.outer(u, u) / (1.0 + x @ u)
        if len(self.buffer) > self.window:
            old_x, old_y = self.buffer.popleft()
            self.V -= np.outer(old_x, old_x)
            self.xy_sum -= old_y * old_x
            if self.V_inv is not None:
                u = self.V_inv @ old_x
                denom = 1.0 - old_x @ u
                # denom = lam_min-ish ratio; tiny or negative means cancellation
                if denom <= 1e-10:
                    ok = False
                else:
                    self.V_inv += np.outer(u, u) / denom
        self._since_refresh += 1
        if not ok or self._since_refresh >= self.refresh_every:
            self.refresh()

    def refresh(self) -> None:
        """Rebuild ``V``, ``xy_sum`` and ``V_inv`` directly from the buffer."""
        X = np.array([x for x, _ in self.buffer]).reshape(-1, self.dim)
        y = np.array([y for _, y in self.buffer])
        self.V = self.lam * np.eye(self.dim) + X.T @ X
        self.xy_sum = X.T @ y if len(y) else np.zeros(self.dim)
        if self.lam > 0:
            c = np.linalg.cholesky(self.V)
            ci = np.linalg.solve(c, np.eye(self.dim))
            self.V_inv = ci.T @ ci
        self._since_refresh = 0
        self.n_refresh += 1

    def pinv(self) -> np.ndarray:
        if self.V_inv is not None:
            return self.V_inv
        return np.linalg.pinv(self.V, hermitian=True)

    def theta(self) -> np.ndarray:
        return sw_rlse(self)

    def widths(self, X) -> np.ndarray:
        """``||x||_{V^{-1}}`` (pseudo-inverse when ``lam == 0``) for each row of ``X``."""
        X = np.atleast_2d(X)
        q = np.einsum("ij,jk,ik->i", X, self.pinv(), X)
        return np.sqrt(np.maximum(q, 0.0))

    def inverse_error(self) -> float:
        """Relative error ``||V V_inv - I|| / ||I||`` in Frobenius norm."""
        if self.V_inv is None:
            raise ValueError("no inverse is maintained when lam == 0")
        return float(np.linalg.norm(self.V @ self.V_inv - np.eye(self.dim)) / math.sqrt(self.dim))


def push_and_evict(state: WindowGramState, x, y: float) -> WindowGramState:
    state.push(x, y)
    return state


def sw_rlse(state: WindowGramState) -> np.ndarray:
    """Ridge estimate over exactly the buffered observations, ``V^{-1} sum x y``."""
    if state.lam > 0:
        return state.V_inv @ state.xy_sum
    try:
        c = np.linalg.cholesky(state.V)
    except np.linalg.LinAlgError:
        raise SingularDesignError(
            "lam == 0 and the windowed Gram matrix is singular; use a positive regularizer"
        ) from None
    z = np.linalg.solve(c, state.xy_sum)
    return np.linalg.solve(c.T, z)


@dataclass(frozen=True)
class ConfidenceConfig:
    R: float
    L: float = 1.0
    S: float = 1.0
    delta: float = 0.01
    lam: float = 1.0

    def __post_init__(self):
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        if self.R < 0 or self.L <= 0 or self.S <= 0 or self.lam <= 0:
            raise ValueError("R must be >= 0 and L, S, lam > 0")


def beta_radius(cfg: ConfidenceConfig, w: int, d: int) -> float:
    """``R sqrt(d ln((1 + w L^2/lam)/delta)) + sqrt(lam) S``."""
    return cfg.R * math.sqrt(d * math.log((1 + w * cfg.L**2 / cfg.lam) / cfg.delta)) + math.sqrt(cfg.lam) * cfg.S


class WindowSums:
    """Windowed per-item sums that never subtract an evicted value.

    Two-stack queue: the front stack holds suffix sums computed in one pass when
    it is refilled, the back stack a running sum of newer entries. Totals are
    built only from entries still in the window, so evicted data cannot leave
    rounding residue. The grouping of the additions depends on the push count,
    not on the values pushed.
    """

    __slots__ = ("d", "_front", "_back", "_back_sum")

    def __init__(self, d: int):
        self.d = d
        self._front: list = []  # entries (items, values, suffix_sum_list)
        self._back: list = []
        self._back_sum = [0.0] * d

    def push(self, items, values) -> None:
        self._back.append((items, values))
        bs = self._back_sum
        for i, v in zip(items, values):
            bs[i] += v

    def pop_oldest(self):
        if not self._front:
            acc = [0.0] * self.d
            for items, values in reversed(self._back):
                acc = acc.copy()
                for i, v in zip(items, values):
                    acc[i] += v
                self._front.append((items, values, acc))
            self._back = []
            self._back_sum = [0.0] * self.d
        items, values, _ = self._front.pop()
        return items, values

    def totals(self) -> list:
        if self._front:
            f = self._front[-1][2]
            return [a + b for a, b in zip(f, self._back_sum)]
        return list(self._back_sum)


class ItemCounts:
    """Per-item pull counts and reward sums over the last ``window`` rounds."""

    def __init__(self, d: int, window: int):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.d = d
        self.window = int(window)
        self.counts = [0] * d
        self.sums = WindowSums(d)
        self._n = 0

    def __len__(self):
        return self._n

    def push(self, items, values) -> None:
        items = tuple(int(i) for i in items)
        values = tuple(float(v) for v in values)
        self.sums.push(items, values)
        for i in items:
            self.counts[i] += 1
        self._n += 1
        if self._n > self.window:
            old_items, _ = self.sums.pop_oldest()
            for i in old_items:
                self.counts[i] -= 1
            self._n -= 1

    def totals(self) -> list:
        return self.sums.totals()


def sw_mean_darm(counts: ItemCounts):
    """Windowed sample means and a mask of items not pulled within the window.

    Unvisited items get mean 0, the pseudo-inverse convention.
    """
    tot = counts.totals()
    means = np.array([s / n if n > 0 else 0.0 for s, n in zip(tot, counts.counts)])
    unvisited = np.array([n == 0 for n in counts.counts])
    return means, unvisited


def darm_radius(R: float, d: int, T: int, N: int) -> float:
    """``R sqrt(2 ln(2 d T^2) / N)``; ``inf`` for an unvisited arm."""
    if N <= 0:
        return math.inf
    return R * math.sqrt(2.0 * math.log(2.0 * d * T * T) / N)


def semibandit_radius(R: float, d: int, T: int, N: int) -> float:
    """``4 R sqrt(ln(2 d T^2) / (N + 1))``."""
    return 4.0 * R * math.sqrt(math.log(2.0 * d * T * T) / (N + 1))


# --------------------------------------------------------------------------- GLM


@dataclass(frozen=True)
class Link:
    name: str
    mu: object
    dmu: object
    lipschitz: float

    def c_mu(self, radius: float) -> float:
        """Smallest derivative over ``|z| <= radius`` (the link is assumed symmetric-unimodal in dmu)."""
        return float(min(self.dmu(np.array([radius, -radius, 0.0]))))


def _dlogistic(z):
    s = logistic(z)
    return s * (1.0 - s)


LOGISTIC = Link("logistic", logistic, _dlogistic, 0.25)
IDENTITY = Link("identity", lambda z: np.asarray(z, float), lambda z: np.ones_like(np.asarray(z, float)), 1.0)


def glm_quasi_mle(
    X, y, link: Link = LOGISTIC, lam: float = 0.0, theta0=None,
    tol: float = 1e-10, max_iter: int = 100, allow_rank_deficient: bool = False,
) -> np.ndarray:
    """Root of ``sum_s (y_s - mu(<x_s, theta>)) x_s - lam theta = 0`` by damped Newton.

    A step is halved (at most 30 times) until the residual norm decreases. With
    ``allow_rank_deficient`` the Newton system is solved in the least-norm sense,
    so directions not spanned by the data stay at their starting value.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    if n == 0:
        return np.zeros(d) if theta0 is None else np.array(theta0, float)
    if lam == 0 and not allow_rank_deficient and np.linalg.matrix_rank(X.T @ X) < d:
        raise SingularDesignError(
            "windowed design is rank deficient; inject forced exploration of a spanning set of actions"
        )
    theta = np.zeros(d) if theta0 is None else np.array(theta0, dtype=float)

    def residual(th):
        return X.T @ (y - link.mu(X @ th)) - lam * th

    g = residual(theta)
    gn = float(np.linalg.norm(g))
    for _ in range(max_iter):
        if gn <= tol:
            return theta
        J = (X * link.dmu(X @ theta)[:, None]).T @ X + lam * np.eye(d)
        if allow_rank_deficient:
            step = np.linalg.lstsq(J, g, rcond=None)[0]
        else:
            try:
                step = np.linalg.solve(J, g)
            except np.linalg.LinAlgError:
                raise SingularDesignError(
                    "singular quasi-likelihood Jacobian; inject forced exploration of a spanning set of actions"
                ) from None
        scale = 1.0
        for _ in range(31):
            cand = theta + scale * step
            gc = residual(cand)
            gcn = float(np.linalg.norm(gc))
            if gcn < gn:
                break
            scale *= 0.5
        else:
            break
        theta, g, gn = cand, gc, gcn
    if gn <= tol:
        return theta
    raise ConvergenceError(f"quasi-MLE did not converge; final residual {gn:.3e}", theta, gn)


def glm_beta(k_mu: float, c_mu: float, y_max: float, d: int, w: int, L: float, lam0: float, T: int) -> float:
    """Confidence radius of the windowed GLM estimator."""
    return (
        2.0 * k_mu * y_max
        * math.sqrt(2.0 * d * math.log(w) * math.log(2.0 * d * T * T) * (3.0 + 2.0 * math.log(1.0 + 2.0 * L**2 / lam0)))
        / c_mu
    )
