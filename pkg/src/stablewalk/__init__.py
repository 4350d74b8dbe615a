"""Heavy-tailed Markov-modulated random walks: exit times, harmonic functions
and conditioned limits, checked by Monte Carlo."""

from .chain import ChainModel, ParetoIncrementLaw, build_model, iid_model, load_model, save_model
from .decomp import PoissonSolution, solve_poisson
from .errors import AcceptanceFloorError, ConfigError, ModelError, StableWalkError, StatisticalAbort
from .stable import StableParams, positivity_parameter

__version__ = "0.1.0"

__all__ = [
    "AcceptanceFloorError",
    "ChainModel",
    "ConfigError",
    "ModelError",
    "ParetoIncrementLaw",
    "PoissonSolution",
    "StableParams",
    "StableWalkError",
    "StatisticalAbort",
    "build_model",
    "iid_model",
    "load_model",
    "positivity_parameter",
    "save_model",
    "solve_poisson",
]
