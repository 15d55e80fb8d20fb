"""Causal-prior multi-objective multi-fidelity Bayesian optimization."""

from rescue.core import (
    ConfigSpace,
    CostModel,
    Dataset,
    FidelitySpace,
    Observation,
    Problem,
    ProblemSpec,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigSpace",
    "CostModel",
    "Dataset",
    "FidelitySpace",
    "Observation",
    "Problem",
    "ProblemSpec",
    "__version__",
]
