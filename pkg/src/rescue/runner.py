"""Budgeted optimization loop, method ablations and result export."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from rescue.acquisition import (AcquisitionConfig, AcquisitionContext, AcquisitionResult,
                                feasibility_probability, select_next)
from rescue.benchmarks import BenchmarkProblem, OracleFront, make_problem, oracle_pareto
from rescue.causal import (AgnosticPrior, CausalGraph, CausalModel, ObservationalDataset, dataset_to_rows,
                           fit_scm, load_graph, pc_discover, should_update_cpm)
from rescue.core import TARGET_FIDELITY, Dataset, DomainError
from rescue.moea import Nsga2Config, nsga2_optimize
from rescue.pareto import area_under_regret, hypervolume, log_hv_regret, pareto_filter
from rescue.sampling import InitSamplerConfig, initial_sample
from rescue.surrogate import HyperoptConfig, KernelSpec, MfcgpPosterior, fit

log = logging.getLogger(__name__)

METHODS = ("rescue", "hvkg_noncausal", "ehvi_single_fidelity")
METHOD_ALIASES = {"ehvi": "ehvi_single_fidelity", "hvkg": "hvkg_noncausal"}


class ConfigError(ValueError):
    """Invalid run configuration."""


class RunAborted(RuntimeError):
    """Numerical failure during a run; ``log`` holds the rows logged so far."""

    def __init__(self, message, log_):
        super().__init__(message)
        self.log = log_


@dataclass
class RunConfig:
    """Configuration of one optimization run (JSON-serializable)."""

    problem: str = "healthcare"
    problem_params: dict = field(default_factory=dict)
    budget: float = 40.0
    init_budget: float | None = None
    update_cycle: int = 5
    method: str = "rescue"
    seed: int = 0
    w: float = 0.5
    n_fantasies: int = 8
    n_inner_candidates: int = 256
    n_outer: int = 64
    n_fidelity_levels: int = 8
    feasibility_threshold: float = 0.5
    noise_variance: float = 1e-4
    hyperopt: bool = True
    hyperopt_every: int = 1
    hyperopt_restarts: int = 8
    hyperopt_max_evals: int = 50
    standardize: bool = True
    prior: str = "causal"
    n_observational: int = 200
    alpha: float = 0.05
    n_mc: int = 256
    nsga_population: int = 100
    nsga_generations: int = 50
    max_iterations: int | None = None
    track_regret: bool = True
    oracle_grid: list | None = None
    dag: str | None = None
    observational_csv: str | None = None
    dump_acquisition: bool = False
    output_dir: str | None = None

    def __post_init__(self):
        self.method = METHOD_ALIASES.get(self.method, self.method)
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.init_budget is None:
            self.init_budget = 0.2 * self.budget
        if not self.budget >= self.init_budget > 0:
            raise ConfigError("need budget >= init_budget > 0")
        if self.update_cycle < 1 or self.hyperopt_every < 1:
            raise ConfigError("update_cycle and hyperopt_every must be at least 1")
        if self.prior not in ("causal", "agnostic"):
            raise ConfigError("prior must be 'causal' or 'agnostic'")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def acquisition(self, t: int) -> AcquisitionConfig:
        return AcquisitionConfig(self.w, self.n_fantasies, self.n_inner_candidates, self.n_outer,
                                 self.n_fidelity_levels, self.feasibility_threshold, "sobol",
                                 seed=self.seed * 100_003 + t)


@dataclass
class RunLog:
    config: RunConfig
    problem: BenchmarkProblem
    rows: list = field(default_factory=list)
    curve: list = field(default_factory=list)
    pareto_X: np.ndarray | None = None
    pareto_Y: np.ndarray | None = None
    pareto_feasible: np.ndarray | None = None
    hv_star: float | None = None
    reference: np.ndarray | None = None
    final_inferred_hv: float | None = None
    final_log_regret: float | None = None
    aur: float | None = None
    n_init: int = 0
    aborted: str | None = None

    @property
    def iterations(self) -> int:
        return sum(1 for r in self.rows if r["t"] > 0)

    @property
    def cumulative_cost(self) -> float:
        return self.rows[-1]["cumulative_cost"] if self.rows else 0.0

    def fidelity_histogram(self) -> dict:
        hist: dict[str, int] = {}
        for r in self.rows:
            if r["t"] > 0:
                key = repr(round(r["s"], 6))
                hist[key] = hist.get(key, 0) + 1
        return dict(sorted(hist.items()))

    def violation_rate(self) -> float:
        opt = [r for r in self.rows if r["t"] > 0]
        if not opt:
            return 0.0
        return sum(1 for r in opt if not r["feasible"]) / len(opt)

    def summary(self) -> dict:
        return {
            "problem": self.config.problem,
            "method": self.config.method,
            "seed": self.config.seed,
            "config_hash": self.config.config_hash(),
            "n_init": self.n_init,
            "iterations": self.iterations,
            "cumulative_cost": self.cumulative_cost,
            "budget": self.config.budget,
            "hv_star": self.hv_star,
            "reference": None if self.reference is None else self.reference.tolist(),
            "final_inferred_hv": self.final_inferred_hv,
            "final_log_regret": self.final_log_regret,
            "aur": self.aur,
            "fidelity_histogram": self.fidelity_histogram(),
            "violation_rate": self.violation_rate(),
            "aborted": self.aborted,
        }


def _aur_within_budget(curve, budget: float) -> float:
    """Trapezoidal area under the (cost, log regret) curve truncated at ``budget``."""
    pts = [(c, r) for c, r in curve]
    if len(pts) < 2:
        return 0.0
    out = [pts[0]]
    for (c0, r0), (c1, r1) in zip(pts, pts[1:]):
        if c1 <= budget:
            out.append((c1, r1))
            continue
        if c0 < budget:
            out.append((budget, r0 + (r1 - r0) * (budget - c0) / (c1 - c0)))
        break
    return area_under_regret(out)


class Runner:
    """Algorithm 1 for a single configuration."""

    def __init__(self, config: RunConfig, problem: BenchmarkProblem | None = None,
                 callback: Callable | None = None, oracle: OracleFront | None = None):
        self.cfg = config
        try:
            self.problem = problem or make_problem(config.problem, **config.problem_params)
        except (TypeError, DomainError) as exc:
            raise ConfigError(str(exc)) from exc
        self.callback = callback
        self.oracle = oracle
        self.space = self.problem.config_space
        self.reference = np.asarray(self.problem.reference, dtype=float)
        self.ctx = AcquisitionContext(self.space, self.problem.fidelity_space, self.problem.cost_model,
                                      self.reference, self.problem.thresholds, self.problem.directions)
        self.single_fidelity = config.method == "ehvi_single_fidelity"
        self.causal = config.method == "rescue" and config.prior == "causal"
        self.specs = None

    # -- causal layer
    def _observational(self) -> ObservationalDataset:
        if self.cfg.observational_csv:
            data = ObservationalDataset.from_csv(self.cfg.observational_csv)
            return ObservationalDataset(self.problem.node_names, data.select(self.problem.node_names))
        return self.problem.observational_data(self.cfg.n_observational, seed=self.cfg.seed)

    def _fit_cpm(self, data: ObservationalDataset, graph: CausalGraph | None):
        p = self.problem
        if graph is None:
            graph = pc_discover(data, p.tiers, self.cfg.alpha, exogenous=[p.fidelity_name])
        scm = fit_scm(graph, data)
        make = lambda outs: CausalModel(graph, scm, list(p.config_space.names), list(outs), p.fidelity_name,
                                        self.cfg.n_mc, self.cfg.seed, self.space)
        return make(p.objective_names), (make(p.constraint_names) if p.Q else None)

    # -- surrogate
    def _fit_models(self, dataset: Dataset, t: int, obj_prior, con_prior):
        cfg, p = self.cfg, self.problem
        if self.specs is None:
            ps = 1.0 if self.causal else 0.0
            self.specs = (KernelSpec.default(p.d, p.M, ps, cfg.noise_variance),
                          KernelSpec.default(p.d, p.Q, ps, cfg.noise_variance) if p.Q else None)
        data = dataset
        if self.single_fidelity:
            data = dataset.subset([abs(r.s - TARGET_FIDELITY) < 1e-12 for r in dataset])
        hyper = cfg.hyperopt and (t - 1) % cfg.hyperopt_every == 0 and len(data) > 0
        hcfg = HyperoptConfig(cfg.hyperopt_restarts, cfg.hyperopt_max_evals, seed=cfg.seed * 7919 + t,
                              optimize_prior_scale=self.causal)
        models = []
        for k, (spec, prior, outputs) in enumerate(((self.specs[0], obj_prior, "y"),
                                                    (self.specs[1], con_prior, "h"))):
            if spec is None:
                models.append(None)
                continue
            if len(data) == 0:
                models.append(MfcgpPosterior(self.space, spec, prior, np.zeros((0, p.d)), [], np.zeros((0, spec.n_outputs))))
                continue
            m = fit(data, spec, prior, self.space, hyperopt=hyper, outputs=outputs,
                    standardize=cfg.standardize, hyperopt_cfg=hcfg)
            models.append(m)
        self.specs = (models[0].spec, models[1].spec if models[1] is not None else None)
        return models

    # -- evaluation protocol
    def inferred_front(self, model: MfcgpPosterior, cmodel: MfcgpPosterior | None, seed: int):
        """NSGA-II on posterior means at the target fidelity, scored with the true objectives."""
        p, cfg = self.problem, self.cfg

        def objective(X):
            F = model.mean(X, TARGET_FIDELITY)
            if cmodel is None:
                return F, np.zeros(len(X))
            probs = feasibility_probability(cmodel, X, p.thresholds, p.directions)
            return F, np.sum(np.maximum(cfg.feasibility_threshold - probs, 0.0), axis=1)

        res = nsga2_optimize(objective, self.space, Nsga2Config(cfg.nsga_population, cfg.nsga_generations,
                                                                 seed=seed, reference=tuple(self.reference)))
        Y, H = p.evaluate_batch(res.X, TARGET_FIDELITY)
        feas = p.feasible(H)
        hv = hypervolume(np.minimum(pareto_filter(Y[feas]), self.reference), self.reference) if feas.any() else 0.0
        return res.X, Y, feas, hv

    def run(self) -> RunLog:
        cfg, p = self.cfg, self.problem
        logobj = RunLog(cfg, p, reference=self.reference)
        track = cfg.track_regret
        if track and self.oracle is None:
            grid = tuple(cfg.oracle_grid) if cfg.oracle_grid else None
            self.oracle = oracle_pareto(p, grid, self.reference)
        if self.oracle is not None:
            logobj.hv_star = self.oracle.hv_star

        noise_rng = np.random.default_rng([cfg.seed, 17])
        dataset = initial_sample(p, InitSamplerConfig(cfg.init_budget, cfg.seed), noise_rng)
        logobj.n_init = len(dataset)
        running = 0.0
        for r in dataset:
            running = math.fsum([running, r.cost])
            logobj.rows.append(self._row(0, r, running, None, None, None))

        if self.causal:
            observational = self._observational()
            graph = load_graph(cfg.dag) if cfg.dag else None
            obj_prior, con_prior = self._fit_cpm(observational, graph)
        else:
            obj_prior, con_prior = AgnosticPrior(p.M), (AgnosticPrior(p.Q) if p.Q else None)

        t = 0
        C = dataset.cumulative_cost
        # a budget equal to the init budget leaves nothing for the optimization phase
        optimize = cfg.budget > cfg.init_budget
        try:
            while optimize and C <= cfg.budget and (cfg.max_iterations is None or t < cfg.max_iterations):
                t += 1
                if self.causal and should_update_cpm(t, cfg.update_cycle):
                    data = observational.concat(dataset_to_rows(dataset, observational.names))
                    obj_prior, con_prior = self._fit_cpm(data, graph)
                model, cmodel = self._fit_models(dataset, t, obj_prior, con_prior)
                if self.callback is not None:
                    self.callback(t, model, cmodel, dataset)
                inferred = log_regret = None
                if track:
                    _, _, _, inferred = self.inferred_front(model, cmodel, seed=cfg.seed * 31 + t)
                    log_regret = log_hv_regret(logobj.hv_star, inferred)
                    logobj.curve.append((C, log_regret))
                res = self._select(model, cmodel, dataset, t)
                obs = p.observe(res.x, res.s, noise_rng)
                dataset.append(obs)
                C = dataset.cumulative_cost
                logobj.rows.append(self._row(t, obs, C, inferred, log_regret, res.value))
                if cfg.dump_acquisition and cfg.output_dir:
                    d = Path(cfg.output_dir) / "acquisition"
                    d.mkdir(parents=True, exist_ok=True)
                    res.to_csv(d / f"iter_{t:04d}.csv", list(self.space.names))
            model, cmodel = self._fit_models(dataset, t + 1, obj_prior, con_prior)
        except ArithmeticError as exc:
            logobj.aborted = str(exc)
            raise RunAborted(str(exc), logobj) from exc
        if self.callback is not None:
            self.callback(t + 1, model, cmodel, dataset)

        X, Y, feas, hv = self.inferred_front(model, cmodel, seed=cfg.seed * 31 + t + 1)
        logobj.pareto_X, logobj.pareto_Y, logobj.pareto_feasible = X, Y, feas
        logobj.final_inferred_hv = hv
        self.final_model = (model, cmodel)
        self.dataset = dataset
        if logobj.hv_star is not None:
            logobj.final_log_regret = log_hv_regret(logobj.hv_star, hv)
            if track:
                logobj.curve.append((C, logobj.final_log_regret))
                logobj.aur = _aur_within_budget(logobj.curve, cfg.budget)
        return logobj

    def _select(self, model, cmodel, dataset, t) -> AcquisitionResult:
        acq = self.cfg.acquisition(t)
        if self.single_fidelity:
            front = np.zeros((0, self.problem.M))
            target = [r for r in dataset if abs(r.s - TARGET_FIDELITY) < 1e-12 and self.problem.feasible(r.h[None])[0]]
            if target:
                front = pareto_filter(np.vstack([r.y for r in target]))
            from rescue.acquisition import outer_candidates
            Xc, Sc = outer_candidates(self.ctx, acq, fidelities=[TARGET_FIDELITY])
            return select_next(model, cmodel, self.ctx, acq, Xc, Sc, method="ehvi", observed_front=front)
        return select_next(model, cmodel, self.ctx, acq)

    def _row(self, t, obs, cumulative, inferred, log_regret, acq_value) -> dict:
        return {
            "t": t, "s": float(obs.s), "cost": float(obs.cost), "cumulative_cost": float(cumulative),
            "inferred_hv": inferred, "log_regret": log_regret, "acquisition_value": acq_value,
            "feasible": bool(self.problem.feasible(obs.h[None])[0]),
            "x": obs.x.tolist(), "y": self.problem.to_internal(obs.y).tolist(), "h": obs.h.tolist(),
        }


def run(config: RunConfig, problem: BenchmarkProblem | None = None, callback=None, oracle=None) -> RunLog:
    return Runner(config, problem, callback, oracle).run()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def run_csv_header(problem) -> list[str]:
    return ["t", "s", "cost", "cumulative_cost", "inferred_hv", "log_regret", "acquisition_value", "feasible",
            *problem.config_space.names, *problem.objective_names, *problem.constraint_names]


def export_results(runlog: RunLog, directory) -> dict:
    """Write run.csv, pareto.csv, summary.json and plotdata/ under ``directory``."""
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "plotdata").mkdir(exist_ok=True)
        p = runlog.problem
        with open(out / "run.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(run_csv_header(p))
            for r in runlog.rows:
                w.writerow([_fmt(r[k]) for k in ("t", "s", "cost", "cumulative_cost", "inferred_hv",
                                                  "log_regret", "acquisition_value", "feasible")]
                           + [_fmt(v) for v in (*r["x"], *r["y"], *r["h"])])
        with open(out / "pareto.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*p.config_space.names, *p.objective_names, "feasible"])
            if runlog.pareto_X is not None:
                nat = p.to_internal(runlog.pareto_Y)
                for x, y, f in zip(runlog.pareto_X, nat, runlog.pareto_feasible):
                    w.writerow([_fmt(v) for v in (*x, *y)] + [_fmt(bool(f))])
        with open(out / "plotdata" / "regret_vs_cost.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cumulative_cost", "log_regret", "best_log_regret"])
            best = math.inf
            for c, r in runlog.curve:
                best = min(best, r)
                w.writerow([_fmt(c), _fmt(r), _fmt(best)])
        summary = runlog.summary()
        summary["created_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        (out / "config.json").write_text(json.dumps(runlog.config.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write results to {out}: {exc}") from exc
    return summary


def _median(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


def run_method_ablation(config: RunConfig, methods, seeds) -> dict:
    """Run every (method, seed) pair; returns per-run summaries and per-method medians."""
    runs = []
    for method in methods:
        for seed in seeds:
            cfg = dataclasses.replace(config, method=METHOD_ALIASES.get(method, method), seed=seed, output_dir=None)
            rl = run(cfg)
            runs.append(rl.summary())
    table = {}
    for method in methods:
        m = METHOD_ALIASES.get(method, method)
        rs = [r for r in runs if r["method"] == m]
        hist: dict[str, int] = {}
        for r in rs:
            for k, v in r["fidelity_histogram"].items():
                hist[k] = hist.get(k, 0) + v
        table[m] = {
            "median_aur": _median(r["aur"] for r in rs),
            "median_final_log_regret": _median(r["final_log_regret"] for r in rs),
            "median_iterations": float(np.median([r["iterations"] for r in rs])),
            "violation_rate": float(np.mean([r["violation_rate"] for r in rs])),
            "fidelity_histogram": dict(sorted(hist.items())),
        }
    return {"runs": runs, "table": table}
