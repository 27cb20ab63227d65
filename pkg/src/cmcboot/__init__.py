"""Model-based bootstrap for finite controlled Markov chains."""

from .bellman import solve_ope, solve_opr
from .bootstrap import BootstrapConfig, Method, run_ensemble
from .core import (EpisodicDataset, Policy, RewardTable, SeedSpec, StateActionSpace,
                   TransitionKernel, simulate_episodes)
from .counting import count, estimate
from .environments import load_mdp, riverswim
from .harness import ExperimentConfig, run_coverage
from .intervals import percentile_ci, pivot_ci

__version__ = "0.1.0"

__all__ = [
    "BootstrapConfig", "EpisodicDataset", "ExperimentConfig", "Method", "Policy", "RewardTable",
    "SeedSpec", "StateActionSpace", "TransitionKernel", "count", "estimate", "load_mdp",
    "percentile_ci", "pivot_ci", "riverswim", "run_coverage", "run_ensemble", "simulate_episodes",
    "solve_ope", "solve_opr",
]
