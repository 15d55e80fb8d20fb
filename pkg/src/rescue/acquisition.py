"""Cost-normalized causal hypervolume knowledge gradient (C-HVKG).

For a candidate ``(x, s)``::

    A(x, s) = (mean_i HV[D + (x, s, y_i)] - nu*) / c(x, s)
    HV[D]   = HV_GP[D] + w * HV_CI

where ``HV_GP`` is the hypervolume of the Pareto-filtered posterior means at
the target fidelity over a shared inner candidate set, ``HV_CI`` that of the
causal prior means (constant across fantasies) and ``nu*`` the same quantity
under the current posterior. Fantasies share one standard-normal draw matrix
across all candidates.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from rescue.core import TARGET_FIDELITY, ConfigSpace, CostModel, DomainError, FidelitySpace
from rescue.pareto import hypervolume, hypervolume_2d_batch, pareto_filter
from rescue.sampling import quasi_random_candidates
from rescue.surrogate import MfcgpPosterior, constraint_posterior, fantasy_draws

log = logging.getLogger(__name__)

CHUNK = 64


@dataclass(frozen=True)
class AcquisitionConfig:
    w: float = 0.5
    n_fantasies: int = 8
    n_inner_candidates: int = 256
    n_outer: int = 64
    n_fidelity_levels: int = 8
    feasibility_threshold: float = 0.5
    candidate_kind: str = "sobol"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise DomainError("w must lie in [0, 1]")
        if min(self.n_fantasies, self.n_inner_candidates, self.n_outer, self.n_fidelity_levels) < 1:
            raise DomainError("candidate and fantasy counts must be at least 1")


@dataclass
class AcquisitionContext:
    """Everything the acquisition needs besides the fitted models."""

    space: ConfigSpace
    fidelity_space: FidelitySpace
    cost_model: CostModel
    reference: np.ndarray
    thresholds: np.ndarray = field(default_factory=lambda: np.zeros(0))
    directions: tuple = ()
    target: float = TARGET_FIDELITY


@dataclass
class AcquisitionResult:
    x: np.ndarray
    s: float
    value: float
    cost: float
    fallback: bool
    X: np.ndarray
    S: np.ndarray
    values: np.ndarray
    costs: np.ndarray
    feas_prob: np.ndarray

    def rows(self) -> list[list]:
        return [[*map(float, x), float(s), float(a), float(c), float(p)]
                for x, s, a, c, p in zip(self.X, self.S, self.values, self.costs, self.feas_prob)]

    def to_csv(self, path, names=None) -> None:
        names = names or [f"x{i + 1}" for i in range(self.X.shape[1])]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*names, "s", "acquisition_value", "cost", "feasibility_probability"])
            for row in self.rows():
                w.writerow([repr(v) for v in row])


def feasibility_probability(constraint_model: MfcgpPosterior | None, X, thresholds, directions,
                            s: float = TARGET_FIDELITY) -> np.ndarray:
    """Per-constraint probability of meeting its threshold, shape ``(n, Q)``."""
    cp = constraint_posterior(constraint_model, X, s)
    if cp.mean.shape[1] == 0:
        return cp.mean
    gamma = np.asarray(thresholds, dtype=float)
    sign = np.array([1.0 if d == "ge" else -1.0 for d in directions])
    std = np.maximum(cp.std, 1e-12)
    return stats.norm.cdf(sign * (cp.mean - gamma) / std)


def feasible_mask(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if probs.shape[1] == 0:
        return np.ones(len(probs), dtype=bool)
    return np.all(probs > threshold, axis=1)


def front_hv(means: np.ndarray, reference) -> float:
    """HV of the Pareto-filtered set of mean vectors against ``reference``."""
    if len(means) == 0:
        return 0.0
    return hypervolume(np.minimum(pareto_filter(means), reference), reference)


def combined_hv(gp_means: np.ndarray, ci_means: np.ndarray | None, reference, w: float) -> float:
    """``HV_GP + w * HV_CI`` for given posterior and causal-prior mean sets."""
    hv = front_hv(gp_means, reference)
    if w > 0 and ci_means is not None:
        hv += w * front_hv(ci_means, reference)
    return hv


def _batch_hv(means: np.ndarray, reference) -> np.ndarray:
    """HV for a stack of mean sets ``(B, n, M)``; NaN rows are ignored."""
    if means.shape[-1] == 2:
        return hypervolume_2d_batch(means, reference)
    out = np.empty(len(means))
    for b, Y in enumerate(means):
        Y = Y[~np.isnan(Y).any(axis=1)]
        out[b] = front_hv(Y, reference)
    return out


@dataclass
class InnerState:
    """Posterior quantities on the inner candidate set at the target fidelity."""

    X: np.ndarray
    feasible: np.ndarray
    mean_std: np.ndarray
    feats: tuple
    hv_ci: float
    nu_star: float


def prepare_inner(model: MfcgpPosterior, constraint_model, ctx: AcquisitionContext, cfg: AcquisitionConfig,
                  X_inner=None) -> InnerState:
    if X_inner is None:
        X_inner = quasi_random_candidates(ctx.space, cfg.n_inner_candidates, cfg.candidate_kind, seed=cfg.seed + 1)
    X_inner = np.atleast_2d(X_inner)
    probs = feasibility_probability(constraint_model, X_inner, ctx.thresholds, ctx.directions, ctx.target)
    feas = feasible_mask(probs, cfg.feasibility_threshold)
    if not feas.any():
        log.warning("no inner candidate is feasible; using the unconstrained set")
        feas = np.ones(len(X_inner), dtype=bool)
    mean_std, _, feats = model._posterior_std_space(X_inner, ctx.target)
    means = mean_std * model.y_std + model.y_mean
    hv_ci = 0.0
    if cfg.w > 0:
        ci_means, _ = model.prior.estimate(X_inner[feas], ctx.target)
        hv_ci = front_hv(ci_means, ctx.reference)
    nu_star = front_hv(means[feas], ctx.reference) + cfg.w * hv_ci
    return InnerState(X_inner, feas, mean_std, feats, hv_ci, nu_star)


def current_value(model: MfcgpPosterior, constraint_model, ctx: AcquisitionContext, cfg: AcquisitionConfig,
                  X_inner) -> float:
    """``nu*``: combined HV of the current posterior means over the inner set."""
    return prepare_inner(model, constraint_model, ctx, cfg, X_inner).nu_star


def fantasy_hv(model: MfcgpPosterior, inner: InnerState, Xc, Sc, z: np.ndarray, reference) -> np.ndarray:
    """HV of the inner front under each fantasy, shape ``(n_candidates, n_fantasies)``."""
    Xc = np.atleast_2d(Xc)
    Sc = np.broadcast_to(np.asarray(Sc, float), (len(Xc),))
    _, Lc, feats_c = model.predictive_factors(Xc, Sc)
    nc = len(Xc)
    keep = np.flatnonzero(inner.feasible)
    if keep.size == 0:
        return np.zeros((nc, len(z)))
    cross = model.cross_covariance(inner.feats, feats_c)[keep]  # (nI, M, nc, M)
    # u[c, i] = Lc[c]^{-T} z[i]
    u = np.stack([linalg.solve_triangular(L.T, z.T, lower=False).T for L in Lc])  # (nc, nf, M)
    delta = np.einsum("ambn,bfn->bfam", cross, u)  # (nc, nf, nI, M)
    means = (inner.mean_std[keep][None, None] + delta) * model.y_std + model.y_mean
    _, nf, nI, M = means.shape
    return _batch_hv(means.reshape(nc * nf, nI, M), reference).reshape(nc, nf)


def chvkg_values(model: MfcgpPosterior, constraint_model, ctx: AcquisitionContext, cfg: AcquisitionConfig,
                 Xc, Sc, inner: InnerState | None = None) -> np.ndarray:
    """C-HVKG value for each candidate row."""
    inner = inner or prepare_inner(model, constraint_model, ctx, cfg)
    Xc = np.atleast_2d(Xc)
    Sc = np.broadcast_to(np.asarray(Sc, float), (len(Xc),))
    z = fantasy_draws(model.M, cfg.n_fantasies, cfg.seed)
    out = np.empty(len(Xc))
    for start in range(0, len(Xc), CHUNK):
        sl = slice(start, start + CHUNK)
        hv = fantasy_hv(model, inner, Xc[sl], Sc[sl], z, ctx.reference)
        gain = hv.mean(axis=1) + cfg.w * inner.hv_ci - inner.nu_star
        costs = np.array([ctx.cost_model(x, s) for x, s in zip(Xc[sl], Sc[sl])])
        out[sl] = gain / costs
    return out


def chvkg(model, constraint_model, x, s: float, ctx: AcquisitionContext, cfg: AcquisitionConfig,
          inner: InnerState | None = None) -> float:
    return float(chvkg_values(model, constraint_model, ctx, cfg, np.atleast_2d(x), [s], inner)[0])


def ehvi_values(model: MfcgpPosterior, constraint_model, ctx: AcquisitionContext, cfg: AcquisitionConfig,
                Xc, observed_front) -> np.ndarray:
    """One-step expected HV improvement of the observed target front (fantasy estimate)."""
    Xc = np.atleast_2d(Xc)
    z = fantasy_draws(model.M, cfg.n_fantasies, cfg.seed)
    mean_std, Lc, _ = model.predictive_factors(Xc, ctx.target)
    ys = (mean_std[:, None, :] + np.einsum("cmn,fn->cfm", Lc, z)) * model.y_std + model.y_mean
    obs = np.asarray(observed_front, dtype=float).reshape(-1, model.M)
    base = front_hv(obs, ctx.reference)
    nc, nf, M = ys.shape
    stacked = np.concatenate([np.broadcast_to(obs, (nc * nf, len(obs), M)), ys.reshape(nc * nf, 1, M)], axis=1)
    return (_batch_hv(stacked, ctx.reference).reshape(nc, nf).mean(axis=1) - base)


def outer_candidates(ctx: AcquisitionContext, cfg: AcquisitionConfig, fidelities=None):
    """Quasi-random configurations crossed with the offered fidelities."""
    X = quasi_random_candidates(ctx.space, cfg.n_outer, cfg.candidate_kind, seed=cfg.seed + 2)
    levels = np.asarray(fidelities if fidelities is not None else ctx.fidelity_space.levels(cfg.n_fidelity_levels))
    Xc = np.repeat(X, len(levels), axis=0)
    Sc = np.tile(levels, len(X))
    return Xc, Sc


def _argmax(values, costs, X, eligible) -> int:
    idx = np.flatnonzero(eligible)
    keys = sorted(idx, key=lambda i: (-values[i], costs[i], tuple(X[i])))
    return int(keys[0])


def select_next(model: MfcgpPosterior, constraint_model, ctx: AcquisitionContext, cfg: AcquisitionConfig,
                Xc=None, Sc=None, method: str = "chvkg", observed_front=None) -> AcquisitionResult:
    """Maximize the acquisition over a candidate set.

    Ties are broken by lower cost, then lexicographically smaller ``x``.
    Candidates are feasible when every constraint probability at the target
    fidelity exceeds ``cfg.feasibility_threshold``; if none is, the most
    probably feasible configuration is used and ``fallback`` is set.
    """
    if Xc is None:
        Xc, Sc = outer_candidates(ctx, cfg)
    Xc = np.atleast_2d(np.asarray(Xc, dtype=float))
    Sc = np.broadcast_to(np.asarray(Sc, dtype=float), (len(Xc),)).copy()
    costs = np.array([ctx.cost_model(x, s) for x, s in zip(Xc, Sc)])
    probs = feasibility_probability(constraint_model, Xc, ctx.thresholds, ctx.directions, ctx.target)
    feas = feasible_mask(probs, cfg.feasibility_threshold)
    pmin = probs.min(axis=1) if probs.shape[1] else np.ones(len(Xc))
    fallback = not feas.any()
    eligible = feas if not fallback else pmin == pmin.max()
    if fallback:
        log.warning("no feasible acquisition candidate; falling back to the most probably feasible")
    values = np.full(len(Xc), np.nan)
    idx = np.flatnonzero(eligible)
    if method == "chvkg":
        inner = prepare_inner(model, constraint_model, ctx, cfg)
        values[idx] = chvkg_values(model, constraint_model, ctx, cfg, Xc[idx], Sc[idx], inner)
    elif method == "ehvi":
        front = observed_front if observed_front is not None else np.zeros((0, model.M))
        values[idx] = ehvi_values(model, constraint_model, ctx, cfg, Xc[idx], front)
    else:
        raise DomainError(f"unknown acquisition method {method!r}")
    best = _argmax(values, costs, Xc, eligible)
    return AcquisitionResult(Xc[best].copy(), float(Sc[best]), float(values[best]), float(costs[best]), fallback,
                             Xc, Sc, values, costs, pmin)
