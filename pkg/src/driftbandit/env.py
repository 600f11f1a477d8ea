"""Drifting bandit environments.

An environment is a fixed parameter path ``theta_1..theta_T`` together with the
per-round decision sets and a noise model. Rounds are numbered ``1..T`` in every
public function, matching the CSV replay format.

Instances are immutable once built; all randomness lives in the generator passed
to :func:`sample_reward` (or to the episode runner), so one instance can be shared
by many concurrently running episodes.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "ParameterPath",
    "ActionSet",
    "NoiseModel",
    "EnvironmentInstance",
    "Observation",
    "ReplayFormatError",
    "variation_budget",
    "make_sinusoidal",
    "make_piecewise_linear",
    "make_lower_bound_instance",
    "sample_reward",
    "logistic",
    "load_replay_csv",
    "save_replay_csv",
]

_TOL = 1e-9

ACTION_KINDS = ("linear-finite", "standard-basis", "combinatorial")
REWARD_KINDS = ("linear", "glm-logistic", "semi-bandit")


def logistic(z):
    """Numerically stable logistic function, scalar or array."""
    if np.ndim(z) == 0:
        z = float(z)
        if z >= 0:
            return 1.0 / (1.0 + math.exp(-z))
        ez = math.exp(z)
        return ez / (1.0 + ez)
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class ParameterPath:
    """The latent reward vectors ``theta_1..theta_T`` stacked as a ``(T, d)`` array."""

    thetas: np.ndarray
    norm_bound: float = 1.0

    def __post_init__(self):
        thetas = np.array(self.thetas, dtype=float)
        if thetas.ndim != 2 or thetas.shape[0] < 1 or thetas.shape[1] < 1:
            raise ValueError(f"thetas must be a non-empty (T, d) array, got shape {thetas.shape}")
        if not np.all(np.isfinite(thetas)):
            raise ValueError("thetas contain non-finite values")
        if self.norm_bound <= 0:
            raise ValueError("norm_bound must be positive")
        norms = np.linalg.norm(thetas, axis=1)
        worst = int(np.argmax(norms))
        if norms[worst] > self.norm_bound * (1 + _TOL):
            raise ValueError(
                f"|theta_{worst + 1}| = {norms[worst]:.6g} exceeds norm bound {self.norm_bound}"
            )
        thetas.setflags(write=False)
        object.__setattr__(self, "thetas", thetas)

    @property
    def horizon(self) -> int:
        return self.thetas.shape[0]

    @property
    def dim(self) -> int:
        return self.thetas.shape[1]

    def at(self, t: int) -> np.ndarray:
        """Return ``theta_t`` for a 1-based round ``t``."""
        if not 1 <= t <= self.horizon:
            raise IndexError(f"round {t} outside 1..{self.horizon}")
        return self.thetas[t - 1]


@dataclass(frozen=True)
class ActionSet:
    """Decision sets ``D_t``.

    Exactly one of ``vectors`` (a fixed ``(K, d)`` set) or ``per_round`` (one
    ``(K_t, d)`` array per round) describes a finite set. Combinatorial families
    built with :meth:`subsets` carry ``subset_rule`` instead and are enumerated
    lazily, which lets policies use a top-m selection instead of enumeration.
    """

    kind: str
    dim: int
    vectors: np.ndarray | None = None
    per_round: tuple | None = None
    norm_bound: float = 1.0
    max_items: int | None = None
    subset_rule: str | None = None

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise ValueError(f"unknown action kind {self.kind!r}; expected one of {ACTION_KINDS}")
        if self.subset_rule is not None:
            if self.subset_rule not in ("at-most", "exactly"):
                raise ValueError(f"unknown subset rule {self.subset_rule!r}")
            if self.kind != "combinatorial" or self.max_items is None:
                raise ValueError("subset rules need a combinatorial set with max_items")
            return
        if (self.vectors is None) == (self.per_round is None):
            raise ValueError("give exactly one of vectors or per_round")
        sets = [self.vectors] if self.vectors is not None else list(self.per_round)
        frozen = []
        for k, a in enumerate(sets):
            a = np.array(a, dtype=float)
            if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] != self.dim:
                raise ValueError(f"decision set {k} has shape {a.shape}, expected (K, {self.dim})")
            norms = np.linalg.norm(a, axis=1)
            if norms.max() > self.norm_bound * (1 + _TOL):
                raise ValueError(f"decision set {k} has an action with norm {norms.max():.6g} > L")
            a.setflags(write=False)
            frozen.append(a)
        if self.kind == "standard-basis":
            if len(frozen) != 1 or not np.array_equal(frozen[0], np.eye(self.dim)):
                raise ValueError("standard-basis sets contain exactly the d unit vectors")
        if self.kind == "combinatorial":
            for a in frozen:
                if not np.all((a == 0) | (a == 1)):
                    raise ValueError("combinatorial actions must be 0/1 vectors")
            m = int(max(a.sum(axis=1).max() for a in frozen))
            if self.max_items is not None and m != self.max_items:
                raise ValueError(f"max_items={self.max_items} but the largest action has {m} items")
            object.__setattr__(self, "max_items", m)
        if self.vectors is not None:
            object.__setattr__(self, "vectors", frozen[0])
        else:
            object.__setattr__(self, "per_round", tuple(frozen))

    @classmethod
    def standard_basis(cls, d: int) -> "ActionSet":
        return cls("standard-basis", d, vectors=np.eye(d), norm_bound=1.0)

    @classmethod
    def finite(cls, vectors, norm_bound: float | None = None) -> "ActionSet":
        vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
        if norm_bound is None:
            norm_bound = float(np.linalg.norm(vectors, axis=1).max())
        return cls("linear-finite", vectors.shape[1], vectors=vectors, norm_bound=norm_bound)

    @classmethod
    def varying(cls, sets: Sequence, norm_bound: float | None = None) -> "ActionSet":
        sets = [np.atleast_2d(np.asarray(a, dtype=float)) for a in sets]
        if norm_bound is None:
            norm_bound = max(float(np.linalg.norm(a, axis=1).max()) for a in sets)
        return cls("linear-finite", sets[0].shape[1], per_round=tuple(sets), norm_bound=norm_bound)

    @classmethod
    def subsets(cls, d: int, m: int, exact: bool = False) -> "ActionSet":
        """All subsets of ``d`` items with at most (or exactly) ``m`` items, empty set excluded."""
        if not 1 <= m <= d:
            raise ValueError("need 1 <= m <= d")
        return cls(
            "combinatorial", d, norm_bound=math.sqrt(m), max_items=m,
            subset_rule="exactly" if exact else "at-most",
        )

    @classmethod
    def family(cls, indicators) -> "ActionSet":
        indicators = np.atleast_2d(np.asarray(indicators, dtype=float))
        m = int(indicators.sum(axis=1).max())
        return cls("combinatorial", indicators.shape[1], vectors=indicators, norm_bound=math.sqrt(m))

    @property
    def is_fixed(self) -> bool:
        return self.per_round is None

    def at(self, t: int) -> np.ndarray:
        """The decision set of round ``t`` as a ``(K_t, d)`` array."""
        if self.subset_rule is not None:
            return _enumerate_subsets(self.dim, self.max_items, self.subset_rule == "exactly")
        if self.vectors is not None:
            return self.vectors
        return self.per_round[t - 1]

    def contains(self, t: int, x) -> bool:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            return False
        if self.subset_rule is not None:
            if not np.all((x == 0) | (x == 1)):
                return False
            k = int(x.sum())
            return k == self.max_items if self.subset_rule == "exactly" else 1 <= k <= self.max_items
        return bool(np.any(np.all(self.at(t) == x, axis=1)))


_SUBSET_CACHE: dict = {}


def _enumerate_subsets(d: int, m: int, exact: bool) -> np.ndarray:
    key = (d, m, exact)
    if key not in _SUBSET_CACHE:
        sizes = [m] if exact else range(1, m + 1)
        rows = []
        for k in sizes:
            for combo in itertools.combinations(range(d), k):
                row = np.zeros(d)
                row[list(combo)] = 1.0
                rows.append(row)
        arr = np.array(rows)
        arr.setflags(write=False)
        _SUBSET_CACHE[key] = arr
    return _SUBSET_CACHE[key]


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian reward noise with standard deviation ``R``, or Bernoulli item rewards."""

    R: float = 0.1
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind not in ("gaussian", "bernoulli"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "bernoulli":
            object.__setattr__(self, "R", 0.5)
        if self.R < 0:
            raise ValueError("R must be nonnegative")


@dataclass(frozen=True)
class Observation:
    """Feedback of one round.

    ``reward`` is the scalar reward (the sum of item rewards for semi-bandits).
    ``items``/``item_rewards`` are only filled for semi-bandit feedback.
    """

    reward: float
    items: tuple = ()
    item_rewards: tuple = ()
    clipped: bool = False


@dataclass(frozen=True)
class EnvironmentInstance:
    path: ParameterPath
    actions: ActionSet
    noise: NoiseModel = field(default_factory=NoiseModel)
    reward_kind: str = "linear"
    y_max: float = 1.0
    budget: float | None = None
    name: str = "custom"

    def __post_init__(self):
        if self.reward_kind not in REWARD_KINDS:
            raise ValueError(f"unknown reward kind {self.reward_kind!r}; expected one of {REWARD_KINDS}")
        if self.actions.dim != self.path.dim:
            raise ValueError(f"action dimension {self.actions.dim} != parameter dimension {self.path.dim}")
        if not self.actions.is_fixed and len(self.actions.per_round) != self.path.horizon:
            raise ValueError("per-round decision sets must cover every round")
        if self.reward_kind == "semi-bandit":
            if self.actions.kind != "combinatorial":
                raise ValueError("semi-bandit environments need a combinatorial action set")
            th = self.path.thetas
            if th.min() < -_TOL or th.max() > 1 + _TOL:
                raise ValueError("semi-bandit item means must lie in [0, 1]")
        elif self.reward_kind == "linear":
            worst = self.max_abs_mean()
            if worst > 1 + 1e-9:
                raise ValueError(f"instance not normalized: max |<x, theta_t>| = {worst:.6g} > 1")

    @property
    def horizon(self) -> int:
        return self.path.horizon

    @property
    def dim(self) -> int:
        return self.path.dim

    def max_abs_mean(self) -> float:
        if self.actions.is_fixed:
            return float(np.abs(self.path.thetas @ self.actions.at(1).T).max())
        return max(
            float(np.abs(self.actions.at(t) @ self.path.at(t)).max())
            for t in range(1, self.horizon + 1)
        )


def variation_budget(path: ParameterPath | np.ndarray, norm: str = "euclidean") -> float:
    """Total variation ``sum_t ||theta_{t+1} - theta_t||`` of a parameter path."""
    thetas = path.thetas if isinstance(path, ParameterPath) else np.atleast_2d(np.asarray(path, float))
    if thetas.shape[0] < 2:
        return 0.0
    steps = np.diff(thetas, axis=0)
    if norm == "euclidean":
        return float(np.linalg.norm(steps, axis=1).sum())
    if norm == "infinity":
        return float(np.abs(steps).max(axis=1).sum())
    raise ValueError(f"unknown norm {norm!r}; use 'euclidean' or 'infinity'")


def make_sinusoidal(T: int, B_T: float, R: float = 0.1) -> EnvironmentInstance:
    """Two-armed instance whose arm means oscillate in antiphase around 0.5."""
    if T < 1 or B_T <= 0:
        raise ValueError("need T >= 1 and B_T > 0")
    phase = 5.0 * B_T * np.pi * np.arange(1, T + 1) / T
    thetas = np.column_stack([0.5 + 0.3 * np.sin(phase), 0.5 + 0.3 * np.sin(np.pi + phase)])
    return EnvironmentInstance(
        path=ParameterPath(thetas, norm_bound=1.0),
        actions=ActionSet.standard_basis(2),
        noise=NoiseModel(R),
        budget=float(B_T),
        name="sinusoidal",
    )


def _random_unit_vectors(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    while np.any(norms == 0):  # pragma: no cover - probability zero
        bad = norms[:, 0] == 0
        v[bad] = rng.standard_normal((int(bad.sum()), d))
        norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / norms


def piecewise_linear_path(T: int, d: int, n_breaks: int = 30, rng_seed=None):
    """Breakpoints ``tau_0..tau_{n+1}``, knot vectors ``v_s`` and the interpolated ``(T, d)`` path."""
    if T < 2:
        raise ValueError("piecewise-linear paths need T >= 2")
    if n_breaks < 0 or n_breaks > T - 2:
        raise ValueError(f"n_breaks={n_breaks} must lie in [0, T-2={T - 2}]")
    rng = np.random.default_rng(rng_seed)
    inner = np.sort(rng.choice(np.arange(2, T), size=n_breaks, replace=False)) if n_breaks else np.array([], int)
    taus = np.concatenate([[1], inner, [T]]).astype(int)
    knots = _random_unit_vectors(rng, n_breaks + 2, d)
    t = np.arange(1, T + 1)
    # segment s owns tau_s <= t < tau_{s+1}; the last one also owns t = T
    seg = np.clip(np.searchsorted(taus, t, side="right") - 1, 0, len(taus) - 2)
    lo, hi = taus[seg], taus[seg + 1]
    a = ((hi - t) / (hi - lo))[:, None]
    b = ((t - lo) / (hi - lo))[:, None]
    thetas = a * knots[seg] + b * knots[seg + 1]
    # pin breakpoints to the knot vectors exactly
    thetas[taus - 1] = knots
    return taus, knots, thetas


def make_piecewise_linear(
    T: int = 100_000, d: int = 2, n_breaks: int = 30, rng_seed=None, R: float = 0.1,
    actions: ActionSet | None = None,
) -> EnvironmentInstance:
    """Random piecewise-linear drift between unit-length knot vectors.

    With the default action set (the standard basis) this is the 2-armed instance;
    pass a finite set of unit vectors for a linear-bandit variant.
    """
    _, _, thetas = piecewise_linear_path(T, d, n_breaks, rng_seed)
    path = ParameterPath(thetas, norm_bound=1.0)
    return EnvironmentInstance(
        path=path,
        actions=actions if actions is not None else ActionSet.standard_basis(d),
        noise=NoiseModel(R),
        budget=variation_budget(path),
        name="piecewise-linear",
    )


def lower_bound_block_length(T: int, d: int, B_T: float) -> int:
    return int(math.ceil((d * T) ** (2 / 3) * B_T ** (-2 / 3)))


def make_lower_bound_instance(
    T: int, d: int, B_T: float, rng_seed=None, n_directions: int = 64,
    basis_only: bool = False, R: float = 0.1,
) -> EnvironmentInstance:
    """Block-wise stationary hard instance.

    The horizon is cut into blocks of ``H = ceil((dT)^{2/3} B_T^{-2/3})`` rounds and
    each block draws its own parameter uniformly from ``{+-sqrt(d/4H)}^d``. The
    decision set is a fixed sample of ``n_directions`` unit vectors plus the signed
    basis vectors (or just the basis with ``basis_only``).
    """
    if d < 1 or T < 1:
        raise ValueError("need d >= 1 and T >= 1")
    lo, hi = d / math.sqrt(T), 8 * T / d**2
    if not lo <= B_T <= hi:
        raise ValueError(f"B_T={B_T} outside the admissible range [{lo:.6g}, {hi:.6g}]")
    rng = np.random.default_rng(rng_seed)
    H = lower_bound_block_length(T, d, B_T)
    n_blocks = math.ceil(T / H)
    mag = math.sqrt(d / (4 * H))
    signs = rng.choice([-1.0, 1.0], size=(n_blocks, d))
    thetas = np.repeat(signs * mag, H, axis=0)[:T]
    if basis_only:
        actions = ActionSet.standard_basis(d)
    else:
        eye = np.eye(d)
        vecs = np.vstack([_random_unit_vectors(rng, n_directions, d), eye, -eye])
        actions = ActionSet.finite(vecs, norm_bound=1.0)
    return EnvironmentInstance(
        path=ParameterPath(thetas, norm_bound=1.0),
        actions=actions,
        noise=NoiseModel(R),
        budget=float(B_T),
        name="lower-bound",
    )


def _realize(env: EnvironmentInstance, t: int, x: np.ndarray, rng: np.random.Generator) -> Observation:
    theta = env.path.at(t)
    if env.reward_kind == "semi-bandit":
        items = tuple(int(i) for i in np.flatnonzero(x))
        u = rng.random(env.dim)
        w = (u < theta).astype(float)
        vals = tuple(float(w[i]) for i in items)
        return Observation(float(sum(vals)), items, vals)
    z = float(x @ theta)
    eta = env.noise.R * float(rng.standard_normal())
    if env.reward_kind == "linear":
        return Observation(z + eta)
    y = logistic(z) + eta
    clipped = not 0.0 <= y <= env.y_max
    return Observation(min(max(y, 0.0), env.y_max), clipped=clipped)


def sample_reward(env: EnvironmentInstance, t: int, action, rng: np.random.Generator) -> Observation:
    """Draw the feedback for playing ``action`` (a d-vector) in round ``t``."""
    x = np.asarray(action, dtype=float)
    if not env.actions.contains(t, x):
        raise ValueError(f"action {x.tolist()} is not in the decision set of round {t}")
    return _realize(env, t, x, rng)


# --------------------------------------------------------------------------- CSV replay


class ReplayFormatError(ValueError):
    """Raised for malformed replay files; the message names file and row."""


def _fmt(v: float) -> str:
    return repr(float(v))


def save_replay_csv(env: EnvironmentInstance, path_file, actions_file) -> None:
    d = env.dim
    with open(path_file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"theta_{i}" for i in range(1, d + 1)])
        for t, row in enumerate(env.path.thetas, start=1):
            w.writerow([t] + [_fmt(v) for v in row])
    with open(actions_file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "action_id"] + [f"x_{i}" for i in range(1, d + 1)])
        if env.actions.is_fixed:
            for k, x in enumerate(env.actions.at(1), start=1):
                w.writerow(["*", k] + [_fmt(v) for v in x])
        else:
            for t in range(1, env.horizon + 1):
                for k, x in enumerate(env.actions.at(t), start=1):
                    w.writerow([t, k] + [_fmt(v) for v in x])


def _read_rows(fname, prefix_cols: int, what: str):
    with open(fname, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ReplayFormatError(f"{fname}: empty {what} file") from None
        width = len(header)
        if width <= prefix_cols:
            raise ReplayFormatError(f"{fname}: header has no vector columns")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ReplayFormatError(
                    f"{fname}: row {lineno} has {len(row)} columns, expected {width} "
                    f"(dimension mismatch)"
                )
            try:
                vec = [float(c) for c in row[prefix_cols:]]
            except ValueError:
                raise ReplayFormatError(f"{fname}: row {lineno} has a non-numeric cell") from None
            rows.append((lineno, row[:prefix_cols], vec))
    return width - prefix_cols, rows


def load_replay_csv(
    path_file, actions_file, R: float = 0.1, reward_kind: str = "linear",
    norm_bound: float | None = None,
) -> EnvironmentInstance:
    """Build an instance from a parameter-path CSV and an action-set CSV."""
    d, rows = _read_rows(path_file, 1, "path")
    if not rows:
        raise ReplayFormatError(f"{path_file}: no rounds")
    thetas = []
    for expected, (lineno, (t,), vec) in enumerate(rows, start=1):
        try:
            t_val = int(t)
        except ValueError:
            raise ReplayFormatError(f"{path_file}: row {lineno} has a non-numeric round index") from None
        if t_val != expected:
            raise ReplayFormatError(f"{path_file}: row {lineno} is round {t_val}, expected round {expected} (missing round)")
        thetas.append(vec)
    thetas = np.array(thetas)
    T = len(thetas)
    if norm_bound is None:
        norm_bound = max(1.0, float(np.linalg.norm(thetas, axis=1).max()))
    path = ParameterPath(thetas, norm_bound=norm_bound)

    da, arows = _read_rows(actions_file, 2, "action")
    if da != d:
        raise ReplayFormatError(f"{actions_file}: actions have dimension {da}, path has {d}")
    always, by_round = [], {}
    for lineno, (t, _aid), vec in arows:
        if t == "*":
            always.append(vec)
            continue
        try:
            t_val = int(t)
        except ValueError:
            raise ReplayFormatError(f"{actions_file}: row {lineno} has a non-numeric round index") from None
        if not 1 <= t_val <= T:
            raise ReplayFormatError(f"{actions_file}: row {lineno} refers to round {t_val} outside 1..{T}")
        by_round.setdefault(t_val, []).append(vec)
    if not always and not by_round:
        raise ReplayFormatError(f"{actions_file}: no actions")
    if not by_round:
        vecs = np.array(always)
        if vecs.shape == (d, d) and np.array_equal(vecs, np.eye(d)):
            actions = ActionSet.standard_basis(d)
        elif reward_kind == "semi-bandit":
            actions = ActionSet.family(vecs)
        else:
            actions = ActionSet.finite(vecs)
    else:
        sets = []
        for t in range(1, T + 1):
            vecs = always + by_round.get(t, [])
            if not vecs:
                raise ReplayFormatError(f"{actions_file}: round {t} has an empty decision set")
            sets.append(np.array(vecs))
        actions = ActionSet.varying(sets)
    return EnvironmentInstance(
        path=path, actions=actions,
        noise=NoiseModel(R, "bernoulli" if reward_kind == "semi-bandit" else "gaussian"),
        reward_kind=reward_kind, budget=variation_budget(path), name="replay",
    )
