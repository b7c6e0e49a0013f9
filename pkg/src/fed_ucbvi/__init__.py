"""Federated UCBVI simulator for heterogeneous tabular episodic MDPs."""

from fed_ucbvi.errors import ConfigError, InputError, InvariantError
from fed_ucbvi.mdp import (
    TabularMDP,
    ValueTables,
    evaluate_policy,
    optimal_values,
    sample_episode,
    validate_mdp,
)
from fed_ucbvi.envs import Fleet, make_gridworld, make_lower_bound_mdp, make_synthetic
from fed_ucbvi.harness import ExperimentConfig, RunMetrics, run_experiment, write_csv

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "Fleet",
    "InputError",
    "InvariantError",
    "RunMetrics",
    "TabularMDP",
    "ValueTables",
    "evaluate_policy",
    "make_gridworld",
    "make_lower_bound_mdp",
    "make_synthetic",
    "optimal_values",
    "run_experiment",
    "sample_episode",
    "validate_mdp",
    "write_csv",
]

__version__ = "0.1.0"
