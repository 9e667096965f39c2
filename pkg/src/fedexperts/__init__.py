"""Differentially private federated online prediction from experts."""

from fedexperts.core import (
    CommLedger,
    RandomSource,
    SimplexPoint,
    Transcript,
    convex_combination,
    per_client_regret,
    simplex_vertex,
)
from fedexperts.fed_ope_stoch import StochConfig, run_fed_stoch
from fedexperts.fed_svt import SvtConfig, run_fed_svt
from fedexperts.harness import ExperimentConfig, run_experiment

__version__ = "0.1.0"

__all__ = [
    "CommLedger",
    "ExperimentConfig",
    "RandomSource",
    "SimplexPoint",
    "StochConfig",
    "SvtConfig",
    "Transcript",
    "convex_combination",
    "per_client_regret",
    "run_experiment",
    "run_fed_stoch",
    "run_fed_svt",
    "simplex_vertex",
]
