"""Staged multi-armed bandits: benchmark, FAL learner, simulator and regret analysis."""

from .core import (
    INITIAL_STATE,
    STOP,
    EnvironmentSpec,
    GainTable,
    NoiseModel,
    SpecError,
    compute_gain_table,
    validate_spec,
)
from .engine import ExperimentConfig, ExperimentResult, RoundTrace, run_experiment, run_round
from .policies import FalParams, FalPolicy, FalStats, BenchmarkPolicy
from .scenarios import screening_env, submodular_env, worked_example_env

__all__ = [
    "INITIAL_STATE",
    "STOP",
    "BenchmarkPolicy",
    "EnvironmentSpec",
    "ExperimentConfig",
    "ExperimentResult",
    "FalParams",
    "FalPolicy",
    "FalStats",
    "GainTable",
    "NoiseModel",
    "RoundTrace",
    "SpecError",
    "compute_gain_table",
    "run_experiment",
    "run_round",
    "screening_env",
    "submodular_env",
    "validate_spec",
    "worked_example_env",
]

__version__ = "0.1.0"
