"""Constrained multi-agent actor-critic with probabilistic safety penalties.

The package bundles: a dense numeric layer (`nn`), the particle /
linear-quadratic / tabular environments (`envs`), exact occupation-measure
oracles (`occupation`), penalty transforms and risk estimators (`risk`),
critic architectures (`critics`), the training loop (`trainer`), scripted
experiment suites (`experiments`), and the command-line interface (`cli`).
"""

from .envs import LqConfig, LqPolicyEvalEnv, ParticleConfig, ParticleEnv, TabularMDP
from .occupation import (
    DiscountSpec,
    OccupationResult,
    discounted_sum,
    effective_horizon_t1,
    effective_horizon_t2,
    occupation_exact,
)
from .risk import PenaltySpec, empirical_cvar, empirical_var, transform_penalty
from .trainer import DualState, TrainerConfig, evaluate, train

__all__ = [
    "DiscountSpec",
    "DualState",
    "LqConfig",
    "LqPolicyEvalEnv",
    "OccupationResult",
    "ParticleConfig",
    "ParticleEnv",
    "PenaltySpec",
    "TabularMDP",
    "TrainerConfig",
    "discounted_sum",
    "effective_horizon_t1",
    "effective_horizon_t2",
    "empirical_cvar",
    "empirical_var",
    "evaluate",
    "occupation_exact",
    "train",
    "transform_penalty",
]

__version__ = "0.1.0"
