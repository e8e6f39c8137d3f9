"""Likelihood-free Bayesian inference for discretely observed SDEs.

The package combines a data-conditional trajectory simulator (weighted
forward particles plus a backward-simulation smoother), a Gaussian
synthetic-likelihood importance correction, dynamically retrained neural
summary statistics, and an ABC sequential Monte Carlo driver.
"""

__version__ = "0.1.0"

from .models import (
    MODEL_FACTORIES,
    PriorBox,
    SdeModel,
    SimulationError,
    DegenerateCovarianceError,
    TimeGrid,
    Trajectory,
    cir_exact_transition_logpdf,
    em_step,
    em_transition_logpdf,
    exact_observation,
    generate_observation,
    get_model,
    milstein_step,
    ou_exact_transition_logpdf,
    simulate_forward,
)

__all__ = [
    "MODEL_FACTORIES",
    "PriorBox",
    "SdeModel",
    "SimulationError",
    "DegenerateCovarianceError",
    "TimeGrid",
    "Trajectory",
    "cir_exact_transition_logpdf",
    "em_step",
    "em_transition_logpdf",
    "exact_observation",
    "generate_observation",
    "get_model",
    "milstein_step",
    "ou_exact_transition_logpdf",
    "simulate_forward",
    "__version__",
]
