"""NSGA-II with constrained domination and an elitist external archive."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from rescue.core import ConfigSpace, DomainError
from rescue.pareto import hypervolume, pareto_mask, reference_from_observations

log = logging.getLogger(__name__)


def non_dominated_sort(points) -> list[np.ndarray]:
    """Successive Pareto layers as index arrays (F1 first)."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    remaining = np.arange(len(P))
    fronts = []
    while remaining.size:
        mask = pareto_mask(P[remaining])
        fronts.append(remaining[mask])
        remaining = remaining[~mask]
    return fronts


def crowding_distance(front) -> np.ndarray:
    """Crowding distance of each row of a non-dominated set."""
    F = np.atleast_2d(np.asarray(front, dtype=float))
    n = len(F)
    dist = np.zeros(n)
    if n <= 2:
        return np.full(n, np.inf)
    for m in range(F.shape[1]):
        order = np.argsort(F[:, m], kind="stable")
        f = F[order, m]
        span = f[-1] - f[0]
        dist[order[0]] = dist[order[-1]] = np.inf
        if span <= 0:
            continue
        dist[order[1:-1]] += (f[2:] - f[:-2]) / span
    return dist


@dataclass(frozen=True)
class Nsga2Config:
    population: int = 100
    generations: int = 50
    crossover_eta: float = 15.0
    crossover_prob: float = 0.9
    mutation_eta: float = 20.0
    mutation_prob: float | None = None
    seed: int = 0
    reference: tuple | None = None

    def __post_init__(self):
        if self.population < 4 or self.population % 2:
            raise DomainError("population must be even and at least 4")
        if not 0 <= self.crossover_prob <= 1 or (self.mutation_prob is not None and not 0 <= self.mutation_prob <= 1):
            raise DomainError("probabilities must lie in [0, 1]")


@dataclass
class Nsga2Result:
    """Final non-dominated set.

    ``feasible`` is False when no feasible point was ever found; ``X``/``F``
    then hold the least-violating front. ``hv_history`` is the archive HV
    after initialization and after each generation.
    """

    X: np.ndarray
    F: np.ndarray
    feasible: bool
    hv_history: list = field(default_factory=list)
    reference: np.ndarray | None = None


def _sbx(P1, P2, eta, prob, rng):
    """Bounded simulated binary crossover on the unit cube, row-wise over parent pairs."""
    n, d = P1.shape
    C1, C2 = P1.copy(), P2.copy()
    do_pair = rng.random(n) <= prob
    do_var = rng.random((n, d)) <= 0.5
    u = rng.random((n, d))
    mask = do_pair[:, None] & do_var & (np.abs(P1 - P2) > 1e-14)
    y1 = np.minimum(P1, P2)
    y2 = np.maximum(P1, P2)
    delta = np.where(mask, y2 - y1, 1.0)

    def spread(beta_edge):
        alpha = 2.0 - beta_edge ** -(eta + 1.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            low = (u * alpha) ** (1.0 / (eta + 1.0))
            high = (1.0 / (2.0 - u * alpha)) ** (1.0 / (eta + 1.0))
        return np.where(u <= 1.0 / alpha, low, high)

    bq1 = spread(1.0 + 2.0 * y1 / delta)
    bq2 = spread(1.0 + 2.0 * (1.0 - y2) / delta)
    a = np.clip(0.5 * ((y1 + y2) - bq1 * delta), 0.0, 1.0)
    b = np.clip(0.5 * ((y1 + y2) + bq2 * delta), 0.0, 1.0)
    flip = P1 > P2
    a, b = np.where(flip, b, a), np.where(flip, a, b)
    C1[mask] = a[mask]
    C2[mask] = b[mask]
    return C1, C2


def _polynomial_mutation(X, eta, prob, rng):
    """Bounded polynomial mutation on the unit cube, row-wise."""
    hit = rng.random(X.shape) < prob
    u = rng.random(X.shape)
    mp = 1.0 / (eta + 1.0)
    lo = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - X) ** (eta + 1.0)
    hi = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * X ** (eta + 1.0)
    with np.errstate(invalid="ignore"):
        dq = np.where(u < 0.5, lo ** mp - 1.0, 1.0 - hi ** mp)
    return np.where(hit, np.clip(X + dq, 0.0, 1.0), X)


def _constrained_fronts(F, cv):
    """Deb's rule: feasible points by non-dominated sorting, infeasible by violation."""
    feas = np.flatnonzero(cv <= 0)
    infeas = np.flatnonzero(cv > 0)
    fronts = [feas[f] for f in non_dominated_sort(F[feas])] if feas.size else []
    if infeas.size:
        order = infeas[np.argsort(cv[infeas], kind="stable")]
        vals = cv[order]
        start = 0
        for k in range(1, len(order) + 1):
            if k == len(order) or vals[k] != vals[start]:
                fronts.append(order[start:k])
                start = k
    return fronts


def _rank_and_crowd(F, cv):
    rank = np.empty(len(F), dtype=int)
    crowd = np.empty(len(F))
    fronts = _constrained_fronts(F, cv)
    for r, idx in enumerate(fronts):
        rank[idx] = r
        crowd[idx] = crowding_distance(F[idx])
    return rank, crowd, fronts


def _select_survivors(F, cv, n):
    _, _, fronts = _rank_and_crowd(F, cv)
    chosen = []
    for idx in fronts:
        if len(chosen) + len(idx) <= n:
            chosen.extend(idx.tolist())
            continue
        cd = crowding_distance(F[idx])
        order = np.argsort(-cd, kind="stable")
        chosen.extend(idx[order[: n - len(chosen)]].tolist())
        break
    return np.array(chosen)


def _tournament(rank, crowd, rng, n):
    a = rng.integers(0, len(rank), n)
    b = rng.integers(0, len(rank), n)
    better_a = (rank[a] < rank[b]) | ((rank[a] == rank[b]) & (crowd[a] >= crowd[b]))
    return np.where(better_a, a, b)


def _merge_archive(AX, AF, X, F):
    X_all = np.vstack([AX, X])
    F_all = np.vstack([AF, F])
    keep = pareto_mask(F_all)
    return X_all[keep], F_all[keep]


def nsga2_optimize(objective: Callable, space: ConfigSpace, cfg: Nsga2Config = Nsga2Config()) -> Nsga2Result:
    """Minimize a batched objective ``X -> (F, violation)`` over ``space``.

    ``violation`` is a nonnegative vector; zero means feasible. An external
    archive keeps every feasible non-dominated point seen, which makes the
    archive hypervolume non-decreasing by construction.
    """
    rng = np.random.default_rng(cfg.seed)
    d = space.dims
    pm = cfg.mutation_prob if cfg.mutation_prob is not None else 1.0 / d

    def evaluate(U):
        F, cv = objective(space.denormalize(U))
        F = np.atleast_2d(np.asarray(F, dtype=float))
        cv = np.maximum(np.asarray(cv, dtype=float).reshape(len(U)), 0.0)
        return F, cv

    U = rng.random((cfg.population, d))
    F, cv = evaluate(U)
    M = F.shape[1]
    feas = cv <= 0
    AX, AF = _merge_archive(np.zeros((0, d)), np.zeros((0, M)), U[feas], F[feas])
    if cfg.reference is not None:
        ref = np.asarray(cfg.reference, dtype=float)
    elif feas.any():
        ref = reference_from_observations(F[feas])
    else:
        ref = reference_from_observations(F)
    hv_history = [hypervolume(AF, ref) if len(AF) else 0.0]

    for _ in range(cfg.generations):
        rank, crowd, _ = _rank_and_crowd(F, cv)
        parents = _tournament(rank, crowd, rng, cfg.population)
        C1, C2 = _sbx(U[parents[0::2]], U[parents[1::2]], cfg.crossover_eta, cfg.crossover_prob, rng)
        Uk = _polynomial_mutation(np.vstack([C1, C2]), cfg.mutation_eta, pm, rng)
        Fk, cvk = evaluate(Uk)
        fk = cvk <= 0
        if fk.any():
            AX, AF = _merge_archive(AX, AF, Uk[fk], Fk[fk])
        U_all = np.vstack([U, Uk])
        F_all = np.vstack([F, Fk])
        cv_all = np.concatenate([cv, cvk])
        keep = _select_survivors(F_all, cv_all, cfg.population)
        U, F, cv = U_all[keep], F_all[keep], cv_all[keep]
        hv_history.append(hypervolume(AF, ref) if len(AF) else 0.0)

    if len(AF):
        order = np.lexsort(AF.T[::-1])
        return Nsga2Result(space.denormalize(AX[order]), AF[order], True, hv_history, ref)
    log.warning("no feasible point found; returning the least-violating front")
    best = cv == cv.min()
    idx = np.flatnonzero(best)[pareto_mask(F[best])]
    return Nsga2Result(space.denormalize(U[idx]), F[idx], False, hv_history, ref)
