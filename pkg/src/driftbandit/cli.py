"""Command-line experiment runner.

Three subcommands:

``generate``  materialize instances as path/action CSV files,
``run``       sweep policies over a horizon grid and write summary/trace/block CSVs,
``slope``     fit log-log regret growth per policy from a summary file.

Configuration is a JSON file; command-line flags override it, and the
``DRIFTBANDIT_SEED`` environment variable overrides the file's base seed.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path


from .bob import make_bob
from .env import (
    EnvironmentInstance,
    load_replay_csv,
    make_lower_bound_instance,
    make_piecewise_linear,
    make_sinusoidal,
    save_replay_csv,
    variation_budget,
)
from .policy import (
    baseline_exp3,
    baseline_exp3s,
    make_swucb,
    opt_window_logfactor,
    tuned_window,
)
from .sim import loglog_slope, replicate

log = logging.getLogger("driftbandit")

ENV_KINDS = ("sinusoidal", "piecewise-linear", "lower-bound", "replay")
POLICY_KINDS = ("swucb", "darm", "bob", "exp3", "exp3s")
SWUCB_TUNINGS = ("tuned", "oblivious", "opt", "obl", "fixed", "stationary")
B_RULES = ("constant", "T^1/3", "explicit")

SUMMARY_HEADER = ["policy", "setting", "T", "B_T", "reps", "mean_final_regret", "stderr_final_regret", "wall_ms"]
TRACE_HEADER = ["policy", "rep", "t", "inst_regret", "cum_regret"]
BLOCK_HEADER = ["rep", "block", "j", "window", "norm_reward", "clamped"]

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


# --------------------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    env: dict = field(default_factory=lambda: {"kind": "sinusoidal", "seed": 0, "params": {}})
    policies: list = field(default_factory=lambda: [{"kind": "swucb", "tuning": "tuned"}])
    T_grid: list = field(default_factory=lambda: [10_000])
    B_rule: dict = field(default_factory=lambda: {"rule": "constant", "value": 1.0})
    reps: int = 1
    base_seed: int = 0
    out_dir: str = "out"
    trace_every: int = 0
    jobs: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        kind = self.env.get("kind")
        if kind not in ENV_KINDS:
            raise ConfigError(f"unknown environment kind {kind!r}; valid kinds: {', '.join(ENV_KINDS)}")
        if kind == "replay":
            params = self.env.get("params", {})
            if "path_file" not in params or "actions_file" not in params:
                raise ConfigError("replay environments need params.path_file and params.actions_file")
        if not self.policies:
            raise ConfigError("at least one policy is required")
        for p in self.policies:
            pk = p.get("kind")
            if pk not in POLICY_KINDS:
                raise ConfigError(f"unknown policy kind {pk!r}; valid kinds: {', '.join(POLICY_KINDS)}")
            tuning = p.get("tuning", "tuned")
            if pk in ("swucb", "darm") and tuning not in SWUCB_TUNINGS:
                raise ConfigError(f"unknown tuning {tuning!r}; valid tunings: {', '.join(SWUCB_TUNINGS)}")
            if tuning == "fixed" and "window" not in p.get("params", {}):
                raise ConfigError("tuning 'fixed' needs params.window")
        if not self.T_grid or any(int(T) < 4 for T in self.T_grid):
            raise ConfigError("T grid must be non-empty with every T >= 4")
        if any(b <= a for a, b in zip(self.T_grid, self.T_grid[1:])):
            raise ConfigError("T grid must be strictly ascending")
        rule = self.B_rule.get("rule")
        if rule not in B_RULES:
            raise ConfigError(f"unknown B_T rule {rule!r}; valid rules: {', '.join(B_RULES)}")
        if rule == "explicit" and len(self.B_rule.get("values", [])) != len(self.T_grid):
            raise ConfigError("explicit B_T rule needs one value per T grid entry")
        if rule == "constant" and float(self.B_rule.get("value", 1.0)) <= 0:
            raise ConfigError("B_T must be positive")
        if int(self.reps) < 1:
            raise ConfigError("replication count must be >= 1")
        if int(self.jobs) < 1:
            raise ConfigError("jobs must be >= 1")
        if int(self.trace_every) < 0:
            raise ConfigError("trace_every must be >= 0")
        labels = [policy_label(p) for p in self.policies]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"policy labels must be unique, got {labels}")

    def to_dict(self) -> dict:
        return {
            "env": copy.deepcopy(self.env),
            "policies": copy.deepcopy(self.policies),
            "T_grid": [int(T) for T in self.T_grid],
            "B_rule": copy.deepcopy(self.B_rule),
            "reps": int(self.reps),
            "base_seed": int(self.base_seed),
            "out_dir": str(self.out_dir),
            "trace_every": int(self.trace_every),
            "jobs": int(self.jobs),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        d = copy.deepcopy(data)
        if "T_grid" in d:
            d["T_grid"] = [int(T) for T in d["T_grid"]]
        return cls(**d)

    def B_T(self, i: int, T: int) -> float:
        rule = self.B_rule["rule"]
        if rule == "constant":
            return float(self.B_rule.get("value", 1.0))
        if rule == "T^1/3":
            return float(T) ** (1 / 3)
        return float(self.B_rule["values"][i])


def policy_label(p: dict) -> str:
    if "name" in p:
        return str(p["name"])
    kind, tuning = p["kind"], p.get("tuning", "tuned")
    if kind == "bob":
        return "BOB"
    if kind == "exp3":
        return "EXP3"
    if kind == "exp3s":
        return "EXP3.S" if p.get("params", {}).get("variant", "restart") == "restart" else "EXP3.S(share)"
    if tuning == "stationary":
        return "UCB" if kind == "swucb" else "UCB(d-armed)"
    base = "SW-UCB" if kind == "swucb" else "SW-UCB(d-armed)"
    return f"{base}[{tuning}]"


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _parse_policy_token(tok: str) -> dict:
    # kind[:tuning[:window]]
    parts = tok.strip().split(":")
    p: dict = {"kind": parts[0]}
    if len(parts) > 1 and parts[1]:
        if parts[0] == "exp3s":
            p["params"] = {"variant": parts[1]}
        elif parts[0] == "bob":
            p["params"] = {"setting": parts[1]}
        else:
            p["tuning"] = parts[1]
    if len(parts) > 2:
        try:
            p.setdefault("params", {})["window"] = int(parts[2])
        except ValueError:
            raise ConfigError(f"bad window in policy token {tok!r}") from None
    return p


def build_config(args) -> ExperimentConfig:
    """Merge defaults, the config file, the seed environment variable and flags."""
    data = ExperimentConfig().to_dict()
    if getattr(args, "config", None):
        file_data = load_config(args.config)
        unknown = set(file_data) - set(data)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        data.update(file_data)
    env_seed = os.environ.get("DRIFTBANDIT_SEED")
    if env_seed is not None:
        try:
            data["base_seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"DRIFTBANDIT_SEED must be an integer, got {env_seed!r}") from None

    env = dict(data["env"])
    env.setdefault("params", {})
    env["params"] = dict(env["params"])
    if getattr(args, "kind", None):
        if args.kind != env.get("kind"):
            env["params"] = {}
        env["kind"] = args.kind
    if getattr(args, "env_seed", None) is not None:
        env["seed"] = args.env_seed
    for key in ("d", "R", "n_breaks", "path_file", "actions_file"):
        val = getattr(args, key, None)
        if val is not None:
            env["params"][key] = val
    data["env"] = env
    if getattr(args, "T", None):
        try:
            data["T_grid"] = [int(float(x)) for x in args.T.split(",")]
        except ValueError:
            raise ConfigError(f"bad T grid {args.T!r}") from None
    if getattr(args, "B_rule", None):
        data["B_rule"] = {"rule": args.B_rule}
    if getattr(args, "B", None) is not None:
        data["B_rule"] = {"rule": "constant", "value": args.B}
    if getattr(args, "policies", None):
        data["policies"] = [_parse_policy_token(tok) for tok in args.policies.split(",") if tok.strip()]
    for key in ("reps", "jobs", "trace_every"):
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    if getattr(args, "seed", None) is not None:
        data["base_seed"] = args.seed
    if getattr(args, "out", None):
        data["out_dir"] = args.out
    try:
        return ExperimentConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# --------------------------------------------------------------------------- builders


def build_env(cfg: ExperimentConfig, T: int, B_T: float) -> EnvironmentInstance:
    kind = cfg.env["kind"]
    params = cfg.env.get("params", {})
    seed = cfg.env.get("seed", 0)
    R = float(params.get("R", 0.1))
    if kind == "sinusoidal":
        return make_sinusoidal(T, B_T, R=R)
    if kind == "piecewise-linear":
        return make_piecewise_linear(T, d=int(params.get("d", 2)), n_breaks=int(params.get("n_breaks", 30)),
                                     rng_seed=seed, R=R)
    if kind == "lower-bound":
        return make_lower_bound_instance(T, int(params.get("d", 2)), B_T, rng_seed=seed, R=R,
                                         basis_only=bool(params.get("basis_only", False)))
    env = load_replay_csv(params["path_file"], params["actions_file"], R=R,
                          reward_kind=params.get("reward_kind", "linear"))
    if T > env.horizon:
        raise ConfigError(f"replay file has {env.horizon} rounds, T={T} requested")
    if T < env.horizon:
        from .env import ActionSet, ParameterPath

        path = ParameterPath(env.path.thetas[:T], env.path.norm_bound)
        acts = env.actions
        if not acts.is_fixed:
            acts = ActionSet.varying([acts.at(t) for t in range(1, T + 1)], norm_bound=acts.norm_bound)
        env = EnvironmentInstance(path=path, actions=acts, noise=env.noise, reward_kind=env.reward_kind,
                                  y_max=env.y_max, budget=variation_budget(path), name="replay")
    return env


def effective_budget(cfg: ExperimentConfig, env: EnvironmentInstance, B_T: float) -> float:
    """The budget a known-budget policy is told: measured for generated paths, else the rule's value."""
    if cfg.env["kind"] in ("piecewise-linear", "replay"):
        return float(env.budget if env.budget is not None else variation_budget(env.path))
    return B_T


def _window(tuning: str, setting: str, env: EnvironmentInstance, T: int, B_T: float, params: dict) -> int:
    d = env.dim
    if tuning == "tuned":
        return tuned_window(setting, d, T, B_T).w
    if tuning == "oblivious":
        return tuned_window(setting, d, T, None).w
    if tuning in ("opt", "obl"):
        return opt_window_logfactor(d, T, B_T if tuning == "opt" else None, L=env.actions.norm_bound,
                                    S=env.path.norm_bound, R=env.noise.R).w
    if tuning == "fixed":
        return min(max(int(params["window"]), 1), T)
    return T


class PolicyFactory:
    """Picklable ``env -> policy`` builder for one policy entry."""

    def __init__(self, spec: dict, T: int, B_T: float):
        self.spec = spec
        self.T = T
        self.B_T = B_T
        self.label = policy_label(spec)

    def setting(self, env: EnvironmentInstance) -> str:
        kind = self.spec["kind"]
        if kind == "darm":
            return "d-armed"
        if kind in ("exp3", "exp3s"):
            return "adversarial"
        if kind == "bob":
            return self.spec.get("params", {}).get("setting", _default_setting(env))
        return _default_setting(env)

    def check(self, env: EnvironmentInstance) -> None:
        kind = self.spec["kind"]
        setting = self.setting(env)
        if setting == "d-armed" and env.actions.kind != "standard-basis":
            raise ConfigError(f"policy {self.label!r} needs a standard-basis action set")
        if kind in ("exp3", "exp3s") and (not env.actions.is_fixed or env.reward_kind == "semi-bandit"):
            raise ConfigError(f"policy {self.label!r} needs a fixed finite decision set")
        if env.reward_kind == "semi-bandit" and setting != "semi-bandit":
            raise ConfigError(f"policy {self.label!r} does not match a semi-bandit environment")

    def __call__(self, env: EnvironmentInstance):
        kind = self.spec["kind"]
        params = dict(self.spec.get("params", {}))
        T, B_T = self.T, self.B_T
        setting = self.setting(env)
        if kind in ("swucb", "darm"):
            tuning = self.spec.get("tuning", "tuned")
            w = _window(tuning, setting, env, T, B_T, params)
            return make_swucb(env, w, setting=setting, T=T, name=self.label)
        if kind == "bob":
            pol = make_bob(env, setting=setting, T=T)
            pol.name = self.label
            return pol
        K = len(env.actions.at(1))
        if kind == "exp3":
            pol = baseline_exp3(K, T)
        else:
            pol = baseline_exp3s(K, T, B_T, variant=params.get("variant", "restart"))
        pol.name = self.label
        return pol


def _default_setting(env: EnvironmentInstance) -> str:
    return {"linear": "linear", "glm-logistic": "glm", "semi-bandit": "semi-bandit"}[env.reward_kind]


# --------------------------------------------------------------------------- commands


def _open_out(path: Path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from None


def cmd_generate(cfg: ExperimentConfig) -> list:
    """Write ``path_T{T}.csv`` and ``actions_T{T}.csv`` for each horizon in the grid."""
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    files = []
    for i, T in enumerate(cfg.T_grid):
        env = build_env(cfg, T, cfg.B_T(i, T))
        pf, af = out / f"path_T{T}.csv", out / f"actions_T{T}.csv"
        try:
            save_replay_csv(env, pf, af)
        except OSError as exc:
            raise ConfigError(f"cannot write instance files in {out}: {exc}") from None
        files += [pf, af]
        log.info("wrote %s and %s", pf, af)
    return files


def _trace_rows(label: str, rep: int, trace, every: int):
    T = trace.horizon
    idx = list(range(every, T + 1, every))
    if not idx or idx[-1] != T:
        idx.append(T)
    for t in idx:
        yield [label, rep, t, repr(float(trace.inst_regret[t - 1])), repr(float(trace.cum_regret[t - 1]))]


def cmd_run(cfg: ExperimentConfig) -> list:
    """Run every (policy, T) pair and write the report files; returns the summary rows."""
    out = Path(cfg.out_dir)
    rows = []
    factories = []
    envs = []
    for i, T in enumerate(cfg.T_grid):
        B_rule_val = cfg.B_T(i, T)
        env = build_env(cfg, T, B_rule_val)
        B_T = effective_budget(cfg, env, B_rule_val)
        envs.append((T, env, B_T))
        for spec in cfg.policies:
            f = PolicyFactory(spec, T, B_T)
            f.check(env)
            factories.append(f)

    summary_fh = _open_out(out / "summary.csv")
    trace_writers = {}
    with summary_fh:
        sw = csv.writer(summary_fh)
        sw.writerow(SUMMARY_HEADER)
        k = 0
        for T, env, B_T in envs:
            trace_fh = None
            if cfg.trace_every:
                trace_fh = _open_out(out / f"trace_T{T}.csv")
                trace_writers[T] = csv.writer(trace_fh)
                trace_writers[T].writerow(TRACE_HEADER)
            for spec in cfg.policies:
                fac = factories[k]
                k += 1
                is_bob = spec["kind"] == "bob"
                keep = bool(cfg.trace_every) or is_bob
                summ = replicate(env, fac, cfg.reps, base_seed=cfg.base_seed, parallelism=cfg.jobs,
                                 keep_traces=keep, setting=fac.setting(env), B_T=B_T)
                row = [fac.label, summ.setting, T, repr(float(B_T)), summ.reps, repr(summ.mean_final_regret),
                       repr(summ.stderr_final_regret), f"{summ.wall_ms:.3f}"]
                sw.writerow(row)
                summary_fh.flush()
                rows.append(row)
                log.info("%s T=%d: mean regret %.3f (se %.3f)", fac.label, T, summ.mean_final_regret,
                         summ.stderr_final_regret)
                if cfg.trace_every:
                    for rep, tr in enumerate(summ.traces):
                        trace_writers[T].writerows(_trace_rows(fac.label, rep, tr, cfg.trace_every))
                if is_bob:
                    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in fac.label)
                    with _open_out(out / f"blocks_{safe}_T{T}.csv") as bfh:
                        bw = csv.writer(bfh)
                        bw.writerow(BLOCK_HEADER)
                        for rep, tr in enumerate(summ.traces):
                            for b in tr.blocks:
                                bw.writerow([rep, b.block, b.j, b.window, repr(float(b.norm_reward)), int(b.clamped)])
            if trace_fh is not None:
                trace_fh.close()
    return rows


def read_summary(path) -> list:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != SUMMARY_HEADER:
                raise ConfigError(f"{path}: header {reader.fieldnames} does not match {SUMMARY_HEADER}")
            rows = list(reader)
    except OSError as exc:
        raise ConfigError(f"cannot read summary {path}: {exc}") from None
    out = []
    for n, r in enumerate(rows, start=2):
        try:
            out.append({
                "policy": r["policy"], "setting": r["setting"], "T": int(r["T"]), "B_T": float(r["B_T"]),
                "reps": int(r["reps"]), "mean_final_regret": float(r["mean_final_regret"]),
                "stderr_final_regret": float(r["stderr_final_regret"]), "wall_ms": float(r["wall_ms"]),
            })
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: row {n} is malformed") from None
    return out


def cmd_slope(summary_file, policies=None) -> dict:
    """Per-policy log-log slope; returns ``{policy: (slope, grid)}``."""
    rows = read_summary(summary_file)
    names = list(dict.fromkeys(r["policy"] for r in rows))
    if policies:
        missing = [p for p in policies if p not in names]
        if missing:
            raise ConfigError(f"policy filter matched nothing: {', '.join(missing)}; available: {', '.join(names)}")
        names = [n for n in names if n in policies]
    if not names:
        raise ConfigError("summary file has no rows")
    result = {}
    for name in names:
        sel = sorted((r for r in rows if r["policy"] == name), key=lambda r: r["T"])
        if len(sel) < 3:
            raise ConfigError(f"policy {name!r} has {len(sel)} rows, need at least 3")
        grid = [r["T"] for r in sel]
        slope = loglog_slope(grid, [r["mean_final_regret"] for r in sel])
        result[name] = (slope, grid)
    return result


# --------------------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_verbose(p):
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)


def _add_common(p):
    _add_verbose(p)
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--kind", help=f"environment kind ({', '.join(ENV_KINDS)})")
    p.add_argument("--T", help="comma-separated horizon grid")
    p.add_argument("--B", type=float, help="constant variation budget")
    p.add_argument("--B-rule", dest="B_rule", help=f"budget rule ({', '.join(B_RULES)})")
    p.add_argument("--d", type=int)
    p.add_argument("--R", type=float)
    p.add_argument("--n-breaks", dest="n_breaks", type=int)
    p.add_argument("--path-file", dest="path_file")
    p.add_argument("--actions-file", dest="actions_file")
    p.add_argument("--env-seed", dest="env_seed", type=int)
    p.add_argument("--out", help="output directory")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="driftbandit", description="Sliding-window bandit experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", default=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", help="write instance CSV files")
    _add_common(g)

    r = sub.add_parser("run", help="run a policy/horizon sweep")
    _add_common(r)
    r.add_argument("--policies", help="comma-separated kind[:tuning[:window]] tokens")
    r.add_argument("--reps", type=int)
    r.add_argument("--jobs", type=int)
    r.add_argument("--seed", type=int, help="base seed")
    r.add_argument("--trace-every", dest="trace_every", type=int)
    r.add_argument("--dump-config", dest="dump_config", action="store_true",
                   help="print the merged config as JSON and exit")

    s = sub.add_parser("slope", help="log-log regret slope per policy")
    _add_verbose(s)
    s.add_argument("summary")
    s.add_argument("--policy", action="append", help="restrict to this policy (repeatable)")
    s.add_argument("--out", help="also write the report as CSV")
    return parser


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"driftbandit: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "slope":
            res = cmd_slope(args.summary, args.policy)
            lines = [["policy", "slope", "grid"]]
            for name, (slope, grid) in res.items():
                lines.append([name, repr(slope), " ".join(str(T) for T in grid)])
            for line in lines[1:]:
                print(f"{line[0]}: slope={float(line[1]):.4f} grid={line[2]}")
            if args.out:
                with _open_out(Path(args.out)) as fh:
                    csv.writer(fh).writerows(lines)
            return EXIT_OK
        cfg = build_config(args)
        if args.command == "generate":
            for f in cmd_generate(cfg):
                print(f)
            return EXIT_OK
        if getattr(args, "dump_config", False):
            print(json.dumps(cfg.to_dict(), indent=2))
            return EXIT_OK
        for row in cmd_run(cfg):
            print(",".join(str(c) for c in row))
        return EXIT_OK
    except ConfigError as exc:
        print(f"driftbandit: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported via the exit code
        print(f"driftbandit: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
