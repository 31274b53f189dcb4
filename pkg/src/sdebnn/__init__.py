"""Bayesian neural networks with weights evolving under an SDE, trained by path-space VI."""
__version__ = "0.1.0"

from .brownian import BrownianBatch, BrownianPath, SeedKey
from .errors import (BudgetExceeded, ConfigError, ContractError, DomainError, FormatError,
                     IntegrationDiverged, ReconstructionError, SdeBnnError)
from .metrics import Likelihood, calibration
from .model import PriorSpec, SdeBnnModel, build_model
from .sde import AugmentedState, SolverConfig, em_step, grad_adjoint, grad_backprop, solve
from .variational import elbo_and_grad, elbo_estimate, kl_closed_form_check

__all__ = [
    "__version__", "BrownianBatch", "BrownianPath", "SeedKey", "BudgetExceeded", "ConfigError",
    "ContractError", "DomainError", "FormatError", "IntegrationDiverged", "ReconstructionError",
    "SdeBnnError", "Likelihood", "calibration", "PriorSpec", "SdeBnnModel", "build_model",
    "AugmentedState", "SolverConfig", "em_step", "grad_adjoint", "grad_backprop", "solve",
    "elbo_and_grad", "elbo_estimate", "kl_closed_form_check",
]
