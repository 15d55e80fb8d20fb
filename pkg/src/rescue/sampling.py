"""Cost-aware initial design and quasi-random candidate sets."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from rescue.core import ConfigSpace, CostModel, Dataset, DomainError, FidelitySpace, Problem, StateError

log = logging.getLogger(__name__)

CDF_GRID = 512
MAX_CONSECUTIVE_SKIPS = 100


def fidelity_probabilities(cost_model: CostModel, fidelity_space: FidelitySpace, x=None) -> np.ndarray:
    """Sampling probabilities proportional to inverse cost (discrete spaces)."""
    if not fidelity_space.discrete:
        raise DomainError("probabilities are only defined for discrete fidelity spaces")
    inv = np.array([1.0 / cost_model(x, s) for s in fidelity_space.values])
    return inv / inv.sum()


def _continuous_cdf(cost_model: CostModel, fidelity_space: FidelitySpace, x=None):
    grid = np.linspace(fidelity_space.s_min, fidelity_space.target, CDF_GRID)
    dens = np.array([1.0 / cost_model(x, s) for s in grid])
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    return grid, cum / cum[-1]


def fidelity_inverse_cdf(cost_model: CostModel, fidelity_space: FidelitySpace, u: float, x=None) -> float:
    """Map ``u`` in [0, 1) to a fidelity with density proportional to 1/c(x, s)."""
    if not 0.0 <= u < 1.0:
        raise DomainError(f"u must lie in [0, 1), got {u}")
    if fidelity_space.discrete:
        cdf = np.cumsum(fidelity_probabilities(cost_model, fidelity_space, x))
        idx = int(np.searchsorted(cdf, u, side="left"))
        return fidelity_space.values[min(idx, len(cdf) - 1)]
    grid, cdf = _continuous_cdf(cost_model, fidelity_space, x)
    return float(np.interp(u, cdf, grid))


def cheapest_cost(cost_model: CostModel, fidelity_space: FidelitySpace, x=None) -> float:
    levels = fidelity_space.levels(CDF_GRID)
    return min(cost_model(x, s) for s in levels)


@dataclass(frozen=True)
class InitSamplerConfig:
    budget: float
    seed: int = 0


def initial_sample(problem: Problem, cfg: InitSamplerConfig, rng_noise: np.random.Generator | None = None) -> Dataset:
    """Budgeted random design with inverse-cost fidelity sampling.

    Draws that would overshoot the budget are skipped; sampling stops once
    the cheapest fidelity no longer fits or after 100 consecutive skips.
    """
    c_min = cheapest_cost(problem.cost_model, problem.fidelity_space)
    if cfg.budget < c_min:
        raise StateError(f"initial budget {cfg.budget} cannot afford the cheapest fidelity ({c_min:.4g})")
    rng = np.random.default_rng(cfg.seed)
    space = problem.config_space
    ds = Dataset()
    skips = 0
    while ds.cumulative_cost + c_min <= cfg.budget and skips < MAX_CONSECUTIVE_SKIPS:
        x = space.denormalize(rng.random(space.dims))
        s = fidelity_inverse_cdf(problem.cost_model, problem.fidelity_space, float(rng.random()), x)
        c = problem.cost_model(x, s)
        if ds.cumulative_cost + c <= cfg.budget:
            ds.append(problem.observe(x, s, rng_noise))
            skips = 0
        else:
            skips += 1
    assert ds.cumulative_cost <= cfg.budget
    return ds


def quasi_random_candidates(space: ConfigSpace, n: int, kind: str = "sobol", seed: int = 0, scramble: bool = True):
    """``n`` points in the box from a scrambled Sobol sequence or a Latin hypercube."""
    if n < 1:
        raise DomainError("n must be at least 1")
    if kind == "sobol":
        sampler = qmc.Sobol(d=space.dims, scramble=scramble, seed=seed)
        U = sampler.random_base2(int(np.ceil(np.log2(n))))[:n] if n > 1 else sampler.random(1)
    elif kind == "lhs":
        U = qmc.LatinHypercube(d=space.dims, seed=seed).random(n)
    else:
        raise DomainError(f"unknown candidate kind {kind!r}")
    return space.denormalize(U)
