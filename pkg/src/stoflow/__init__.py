"""Numerical verification of stochastic transport identities for differential forms."""

from .forms import (
    Form,
    VectorField,
    constant_field,
    constant_form,
    divergence,
    evaluate_form,
    exterior_derivative,
    interior_product,
    lie_derivative,
    volume_form,
)
from .sde import BrownianEnsemble, BrownianPath, SdeSystem, integrate_flow, sample_brownian, sample_ensemble
from .quadrature import Simplex, standard_rule
from .experiments import ExperimentConfig, load_config, run

__version__ = "0.1.0"

__all__ = [
    "Form",
    "VectorField",
    "constant_field",
    "constant_form",
    "divergence",
    "evaluate_form",
    "exterior_derivative",
    "interior_product",
    "lie_derivative",
    "volume_form",
    "BrownianEnsemble",
    "BrownianPath",
    "SdeSystem",
    "integrate_flow",
    "sample_brownian",
    "sample_ensemble",
    "Simplex",
    "standard_rule",
    "ExperimentConfig",
    "load_config",
    "run",
]
