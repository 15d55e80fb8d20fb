"""Empirical checks of the regret-bound theory on desk-scale problems."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from rescue.acquisition import AcquisitionConfig, AcquisitionContext, front_hv, prepare_inner
from rescue.benchmarks import BenchmarkProblem, grid_points, make_problem, oracle_pareto
from rescue.causal import CausalModel
from rescue.core import TARGET_FIDELITY, DomainError
from rescue.pareto import hypervolume_exact
from rescue.runner import RunConfig, Runner
from rescue.surrogate import KernelSpec, MfcgpPosterior

log = logging.getLogger(__name__)

DEFAULT_RHO = 0.05
THEORY_GRID = {"healthcare": (50, 20), "adversarial": (40, 40), "branin-currin": (40, 40), "park": (6, 6, 6, 6)}
REGRET_RATIO_LIMIT = 2.0


def beta_schedule(n_grid: int, t, rho: float = DEFAULT_RHO) -> np.ndarray:
    """``beta_t = 2 ln(|grid| t^2 pi^2 / (6 rho))`` for each ``t >= 1``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 1) or n_grid < 1 or not 0 < rho < 1:
        raise DomainError("need t >= 1, n_grid >= 1 and rho in (0, 1)")
    return 2.0 * np.log(n_grid * t ** 2 * math.pi ** 2 / (6.0 * rho))


def bound_rhs(L_hat: float, beta_t, sigma_max, xi_hat: float):
    """``L (sqrt(beta_t) * sigma_max + xi)``."""
    return L_hat * (np.sqrt(beta_t) * np.asarray(sigma_max) + xi_hat)


@dataclass(frozen=True)
class BoundConstants:
    """Constants entering the regret bound.

    ``beta`` holds ``beta_1, beta_2, ...``; ``B`` is a norm proxy kept for
    reporting only.
    """

    L_hat: float
    xi_hat: float
    beta: tuple
    B: float = 1.0
    c_min: float = 1.0

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=float)
        if min(self.L_hat, self.xi_hat, self.B) < 0 or self.c_min <= 0 or np.any(b < 0):
            raise DomainError("bound constants must be nonnegative and c_min positive")
        if np.any(np.diff(b) < 0):
            raise DomainError("beta must be nondecreasing")
        object.__setattr__(self, "beta", tuple(float(v) for v in b))

    def beta_at(self, t: int) -> float:
        return self.beta[min(t, len(self.beta)) - 1]


@dataclass
class BoundTrace:
    t: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    sigma_max: np.ndarray

    def __post_init__(self):
        if not len(self.t) == len(self.lhs) == len(self.rhs) == len(self.sigma_max):
            raise DomainError("trace arrays must have equal lengths")
        if not (np.all(np.isfinite(self.lhs)) and np.all(np.isfinite(self.rhs))):
            raise DomainError("trace values must be finite")

    @property
    def cumulative_lhs(self) -> np.ndarray:
        return np.cumsum(self.lhs)

    @property
    def cumulative_rhs(self) -> np.ndarray:
        return np.cumsum(self.rhs)

    @property
    def failing(self) -> list[int]:
        """Iterations where the per-iteration or the cumulative inequality fails."""
        bad = (self.lhs > self.rhs) | (self.cumulative_lhs > self.cumulative_rhs)
        return [int(t) for t in self.t[bad]]

    @property
    def passed(self) -> bool:
        return not self.failing


@dataclass
class LipschitzEstimate:
    L_hat: float
    n_pairs: int


def estimate_hv_lipschitz(front, reference, n_perturbations: int = 1000, magnitude: float = 0.05,
                          seed: int = 0) -> LipschitzEstimate:
    """Largest observed ``|HV(P) - HV(P')| / max_i ||p_i - p'_i||`` over perturbed copies of ``front``.

    Perturbations keep the cardinality and displace every point by at most
    ``magnitude`` times the front-to-reference span per objective. A uniform
    shift along the all-ones direction is always included. Pairs with zero
    displacement are skipped.
    """
    P = np.atleast_2d(np.asarray(getattr(front, "points", front), dtype=float))
    r = np.asarray(reference, dtype=float)
    if P.shape[1] > 3:
        raise DomainError("exact hypervolume needs at most three objectives")
    span = np.maximum(r - P.min(axis=0), 1e-12)
    base = hypervolume_exact(P, r, warn=False)
    rng = np.random.default_rng(seed)
    D = rng.uniform(-1.0, 1.0, size=(n_perturbations, *P.shape)) * magnitude * span
    shift = -np.ones_like(P) * magnitude * span.min()
    best, n = 0.0, 0
    for delta in (shift, *D):
        disp = np.linalg.norm(delta, axis=1).max()
        if disp == 0:
            continue
        n += 1
        best = max(best, abs(hypervolume_exact(P + delta, r, warn=False) - base) / disp)
    return LipschitzEstimate(best, n)


@dataclass
class XiEstimate:
    xi_hat: float
    mc_error: float
    n_points: int


def _fidelity_grid(problem: BenchmarkProblem, n_s: int) -> np.ndarray:
    fs = problem.fidelity_space
    return np.asarray(fs.values) if fs.discrete else np.linspace(fs.s_min, fs.target, n_s)


def estimate_xi(prior, problem: BenchmarkProblem, grid_n=None, n_s: int = 5, n_mc: int = 2048) -> XiEstimate:
    """``max ||f(x, s) - f_do(x, s)||`` over a configuration grid crossed with fidelities.

    A causal model is re-sampled with ``n_mc`` draws; ``mc_error`` is the
    largest Monte Carlo standard error norm on the grid. Priors without a
    Monte Carlo estimate report zero error.
    """
    X = grid_points(problem.config_space, grid_n or problem.oracle_grid)
    if isinstance(prior, CausalModel):
        prior = dataclasses.replace(prior, n_mc=n_mc, _cache={})
    xi, err = 0.0, 0.0
    for s in _fidelity_grid(problem, n_s):
        Y, _ = problem.evaluate_batch(X, s)
        mean, std = prior.estimate(X, np.full(len(X), s))
        xi = max(xi, float(np.linalg.norm(Y - mean, axis=1).max()))
        if isinstance(prior, CausalModel):
            err = max(err, float(np.linalg.norm(std, axis=1).max() / math.sqrt(n_mc)))
    return XiEstimate(xi, err, len(X) * len(_fidelity_grid(problem, n_s)))


@dataclass
class IterationRecord:
    t: int
    inferred_hv: float
    sigma_max: float


def grid_snapshot(model: MfcgpPosterior, X_feasible, reference) -> tuple[float, float]:
    """HV of the posterior-mean front over ``X_feasible`` and the largest posterior std norm, both at the target."""
    mean, std = model.predict(X_feasible, TARGET_FIDELITY)
    return front_hv(mean, reference), float(np.linalg.norm(std, axis=1).max())


def check_per_iteration_bound(records, hv_star: float, constants: BoundConstants) -> BoundTrace:
    """Evaluate ``HV* - HV(P_t) <= L (sqrt(beta_t) max||sigma_t|| + xi)`` and its cumulative form."""
    t = np.array([r.t for r in records], dtype=int)
    lhs = np.array([hv_star - r.inferred_hv for r in records], dtype=float)
    sig = np.array([r.sigma_max for r in records], dtype=float)
    beta = np.array([constants.beta_at(k) for k in t])
    rhs = bound_rhs(constants.L_hat, beta, sig, constants.xi_hat)
    trace = BoundTrace(t, lhs, rhs, sig)
    if trace.failing:
        log.info("bound fails at iterations %s", trace.failing)
    return trace


@dataclass
class TheoryReport:
    constants: BoundConstants
    trace: BoundTrace
    hv_star: float
    n_grid: int
    lipschitz_pairs: int
    xi_mc_error: float

    @property
    def passed(self) -> bool:
        return self.trace.passed

    def to_dict(self) -> dict:
        tr = self.trace
        return {
            "L_hat": self.constants.L_hat,
            "xi_hat": self.constants.xi_hat,
            "xi_mc_error": self.xi_mc_error,
            "hv_star": self.hv_star,
            "n_grid": self.n_grid,
            "lipschitz_pairs": self.lipschitz_pairs,
            "per_iteration": [
                {"t": int(t), "lhs": float(a), "rhs": float(b), "sigma_max": float(s),
                 "cumulative_lhs": float(ca), "cumulative_rhs": float(cb)}
                for t, a, b, s, ca, cb in zip(tr.t, tr.lhs, tr.rhs, tr.sigma_max, tr.cumulative_lhs,
                                              tr.cumulative_rhs)
            ],
            "failing": tr.failing,
            "pass": self.passed,
        }


def theory_check(config: RunConfig, n_iterations: int = 30, grid_n=None, rho: float = DEFAULT_RHO,
                 n_perturbations: int = 1000, magnitude: float = 0.05, xi_n_s: int = 5,
                 xi_n_mc: int = 2048) -> TheoryReport:
    """Run the optimizer for ``n_iterations`` and check the regret bound at every iteration.

    ``P_t`` is the posterior-mean front over the truly feasible grid at the
    target fidelity; ``xi_hat`` is the largest misspecification of any prior
    used during the run.
    """
    problem = make_problem(config.problem, **config.problem_params)
    grid_n = grid_n or THEORY_GRID.get(config.problem, problem.oracle_grid)
    G = grid_points(problem.config_space, grid_n)
    _, H = problem.evaluate_batch(G, TARGET_FIDELITY)
    G = G[problem.feasible(H)]
    ref = np.asarray(problem.reference, dtype=float)
    oracle = oracle_pareto(problem, reference=ref)

    records: list[IterationRecord] = []
    priors: dict[int, object] = {}

    def callback(t, model, cmodel, dataset):
        hv, sig = grid_snapshot(model, G, ref)
        records.append(IterationRecord(t, hv, sig))
        priors.setdefault(id(model.prior), model.prior)

    # the iteration count, not the budget, ends these runs
    cfg = dataclasses.replace(config, budget=math.inf, init_budget=config.init_budget,
                              max_iterations=n_iterations, track_regret=False, output_dir=None)
    Runner(cfg, problem, callback=callback, oracle=oracle).run()

    xis = [estimate_xi(p, problem, grid_n, xi_n_s, xi_n_mc) for p in priors.values()]
    xi = max(xis, key=lambda e: e.xi_hat)
    lip = estimate_hv_lipschitz(oracle.front, ref, n_perturbations, magnitude, seed=config.seed)
    T = max(r.t for r in records)
    constants = BoundConstants(lip.L_hat, xi.xi_hat, tuple(beta_schedule(len(G), np.arange(1, T + 1), rho)),
                               c_min=problem.cost_model(problem.config_space.lower, problem.fidelity_space.lowest))
    trace = check_per_iteration_bound(records, oracle.hv_star, constants)
    return TheoryReport(constants, trace, oracle.hv_star, len(G), lip.n_pairs, xi.mc_error)


@dataclass
class Lemma3Check:
    weighted_value: float
    delta_sf: float
    slack: float

    @property
    def holds(self) -> bool:
        return self.weighted_value >= self.delta_sf - self.slack


def single_fidelity_gain(model: MfcgpPosterior, constraint_model, ctx: AcquisitionContext,
                         cfg: AcquisitionConfig, x, y_true) -> float:
    """One-step gain of the posterior-mean front after observing the true target value at ``x``."""
    inner = prepare_inner(model, constraint_model, ctx, cfg)
    before = front_hv(model.mean(inner.X[inner.feasible], ctx.target), ctx.reference)
    after_model = model.condition_on(x, ctx.target, y_true)
    after = front_hv(after_model.mean(inner.X[inner.feasible], ctx.target), ctx.reference)
    return after - before


def lemma3_check(model, constraint_model, ctx, cfg, x, s, value, problem: BenchmarkProblem,
                 L_hat: float, xi_hat: float, beta_t: float, sigma_max: float) -> Lemma3Check:
    """Compare ``c(x, s) A(x, s)`` with the single-fidelity gain at ``x`` minus the bound slack."""
    y_true, _ = problem.evaluate_batch(np.atleast_2d(x), TARGET_FIDELITY)
    gain = single_fidelity_gain(model, constraint_model, ctx, cfg, x, y_true[0])
    slack = float(bound_rhs(L_hat, beta_t, sigma_max, xi_hat))
    return Lemma3Check(float(ctx.cost_model(x, s) * value), gain, slack)


def posterior_std_trace(problem: BenchmarkProblem, queries, spec: KernelSpec, prior, transform,
                        grid_n=None) -> np.ndarray:
    """Posterior std at the target over a grid after each prefix of a fixed query sequence.

    Hyperparameters, prior and output transform are held fixed, so the
    trace depends on the query locations only. Returns ``(n_queries, n_grid, M)``.
    """
    G = grid_points(problem.config_space, grid_n or THEORY_GRID.get(problem.name, problem.oracle_grid))
    X = np.array([q[0] for q in queries], dtype=float)
    S = np.array([q[1] for q in queries], dtype=float)
    Y = np.vstack([problem.evaluate_batch(x[None], s)[0] for x, s in zip(X, S)])
    out = []
    for k in range(1, len(X) + 1):
        model = MfcgpPosterior(problem.config_space, spec, prior, X[:k], S[:k], Y[:k], transform)
        out.append(model.predict(G, TARGET_FIDELITY)[1])
    return np.stack(out)


@dataclass
class BiasRobustnessTable:
    """Final log10 regret per ``(method, delta_scale, seed)``."""

    delta_scales: list
    seeds: list
    methods: list
    final_log_regret: dict = field(default_factory=dict)
    iterations: dict = field(default_factory=dict)

    def median(self, method: str, delta: float) -> float:
        return float(np.median([self.final_log_regret[(method, delta, s)] for s in self.seeds]))

    def regret_ratio(self, method: str, delta: float | None = None, base: float | None = None) -> float:
        """Median over seeds of ``regret(delta) / regret(base)`` in linear units."""
        delta = max(self.delta_scales) if delta is None else delta
        base = min(self.delta_scales) if base is None else base
        ratios = [10.0 ** (self.final_log_regret[(method, delta, s)] - self.final_log_regret[(method, base, s)])
                  for s in self.seeds]
        return float(np.median(ratios))

    def to_dict(self) -> dict:
        return {
            "delta_scales": list(self.delta_scales),
            "seeds": list(self.seeds),
            "median_final_log_regret": {m: {repr(d): self.median(m, d) for d in self.delta_scales}
                                        for m in self.methods},
            "regret_ratio": {m: self.regret_ratio(m) for m in self.methods},
        }


def bias_robustness_experiment(delta_scales, seeds, budget: float = 150.0,
                               methods=("rescue", "hvkg_noncausal"), base: RunConfig | None = None) -> BiasRobustnessTable:
    """Run each method on the adversarial-bias problem for every ``delta_scale`` and seed."""
    base = base or RunConfig(problem="adversarial")
    table = BiasRobustnessTable(list(delta_scales), list(seeds), list(methods))
    for delta in delta_scales:
        problem = make_problem("adversarial", delta_scale=delta)
        oracle = oracle_pareto(problem)
        for method in methods:
            for seed in seeds:
                cfg = dataclasses.replace(base, problem="adversarial",
                                          problem_params={**base.problem_params, "delta_scale": delta},
                                          method=method, seed=seed, budget=budget, init_budget=None,
                                          track_regret=False, output_dir=None)
                rl = Runner(cfg, problem, oracle=oracle).run()
                table.final_log_regret[(method, delta, seed)] = rl.final_log_regret
                table.iterations[(method, delta, seed)] = rl.iterations
    return table


__all__ = [
    "BoundConstants", "BoundTrace", "LipschitzEstimate", "XiEstimate", "IterationRecord", "TheoryReport",
    "Lemma3Check", "BiasRobustnessTable", "beta_schedule", "bound_rhs", "estimate_hv_lipschitz",
    "estimate_xi", "grid_snapshot", "check_per_iteration_bound", "theory_check", "single_fidelity_gain",
    "lemma3_check", "posterior_std_trace", "bias_robustness_experiment",
]
