"""Sliding-window UCB and Bandit-over-Bandit for drifting bandit problems."""
from .env import (
    ActionSet,
    EnvironmentInstance,
    NoiseModel,
    Observation,
    ParameterPath,
    load_replay_csv,
    make_lower_bound_instance,
    make_piecewise_linear,
    make_sinusoidal,
    sample_reward,
    save_replay_csv,
    variation_budget,
)
from .bob import BOB, bob_params, bob_run, make_bob
from .policy import (
    SWUCB,
    DArmedSWUCB,
    GLMSWUCB,
    SemiBanditSWUCB,
    baseline_exp3,
    baseline_exp3s,
    baseline_stationary_ucb,
    make_swucb,
    opt_window_logfactor,
    tuned_window,
)
from .sim import loglog_slope, oracle_value, replicate, run_episode

__version__ = "0.1.0"

__all__ = [
    "ActionSet",
    "EnvironmentInstance",
    "NoiseModel",
    "Observation",
    "ParameterPath",
    "load_replay_csv",
    "make_lower_bound_instance",
    "make_piecewise_linear",
    "make_sinusoidal",
    "sample_reward",
    "save_replay_csv",
    "variation_budget",
    "BOB",
    "bob_params",
    "bob_run",
    "make_bob",
    "SWUCB",
    "DArmedSWUCB",
    "GLMSWUCB",
    "SemiBanditSWUCB",
    "baseline_exp3",
    "baseline_exp3s",
    "baseline_stationary_ucb",
    "make_swucb",
    "opt_window_logfactor",
    "tuned_window",
    "loglog_slope",
    "oracle_value",
    "replicate",
    "run_episode",
]
