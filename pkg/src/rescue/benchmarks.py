"""Closed-form multi-fidelity multi-objective test problems.

Every problem is exact at the target fidelity ``s = 1``. Lower fidelities
follow the problem-specific rule documented on each class.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from rescue.causal import ObservationalDataset
from rescue.core import ConfigSpace, CostModel, DomainError, FidelitySpace, Problem, TARGET_FIDELITY
from rescue.moea import Nsga2Config, nsga2_optimize
from rescue.pareto import ParetoFront, hypervolume, reference_from_observations

AGE = 65.0


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def healthcare_eval(bmi, aspirin, s):
    """Return ``(statin, psa, cancer)``; broadcasts over array inputs."""
    bmi, aspirin, s = (np.asarray(v, dtype=float) for v in (bmi, aspirin, s))
    statin = sigmoid(s * (-13.0 + 0.1 * AGE + 0.2 * bmi))
    cancer = sigmoid(s * (2.2 - 0.05 * AGE + 0.01 * bmi - 0.04 * statin + 0.2 * aspirin))
    psa = (s + 6.8) * (0.04 * AGE - 0.15 * bmi + 0.6 * statin + 0.55 * aspirin + cancer)
    return statin, psa, cancer


class BenchmarkProblem(Problem):
    """Problem with vectorized evaluation, an oracle grid and a frozen reference point."""

    oracle_grid: tuple = (50,)

    def _evaluate_raw(self, x, s):
        Y, H = self.evaluate_batch_raw(np.atleast_2d(x), s)
        return Y[0], H[0]

    def grid(self, grid_n=None) -> np.ndarray:
        grid_n = self.oracle_grid if grid_n is None else grid_n
        return grid_points(self.config_space, grid_n)

    @cached_property
    def default_reference(self) -> np.ndarray:
        X = self.grid()
        Y, H = self.evaluate_batch(X, TARGET_FIDELITY)
        feas = self.feasible(H)
        return reference_from_observations(Y[feas] if feas.any() else Y)

    @property
    def reference(self) -> np.ndarray:
        return self.reference_point if self.reference_point is not None else self.default_reference

    def observational_data(self, n: int = 200, seed: int = 0) -> ObservationalDataset:
        """Passive samples over (x, s); x uniform, s uniform over the fidelity space."""
        rng = np.random.default_rng(seed)
        X = self.config_space.denormalize(rng.random((n, self.d)))
        if self.fidelity_space.discrete:
            S = rng.choice(np.asarray(self.fidelity_space.values), size=n)
        else:
            S = self.fidelity_space.s_min + rng.random(n) * (self.fidelity_space.target - self.fidelity_space.s_min)
        rows = []
        for x, s in zip(X, S):
            Y, H = self.evaluate_batch(x[None], s)
            rows.append(np.concatenate([x, [s], H[0], Y[0]]))
        return ObservationalDataset(self.node_names, np.array(rows))


def grid_points(space: ConfigSpace, grid_n) -> np.ndarray:
    """Full tensor grid over the box; ``grid_n`` is an int or one count per dimension."""
    counts = np.broadcast_to(np.atleast_1d(grid_n), (space.dims,))
    if space.dims > 4:
        raise DomainError("grid oracle supports d <= 4")
    axes = [np.linspace(lo, hi, int(n)) for (lo, hi), n in zip(space.bounds, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


class HealthcareProblem(BenchmarkProblem):
    """Statin/PSA minimization with a cancer-risk ceiling.

    Variables ``(BMI, Aspirin)``; the fidelity is the continuous ``S`` in
    ``[0, 1]``. Causal tiers follow the mechanism chain
    Statin -> Cancer -> PSA.
    """

    name = "healthcare"
    oracle_grid = (200, 50)
    PRESETS = {"appendix": 0.35, "experiments": 0.3}

    def __init__(self, cancer_threshold: float = 0.35, noise_std: float = 0.0, cost_rate: float = 4.8):
        super().__init__(
            ConfigSpace(np.array([[20.0, 30.0], [0.0, 1.0]]), ("BMI", "Aspirin")),
            FidelitySpace(s_min=0.0),
            ("Statin", "PSA"),
            ("Cancer",),
            (cancer_threshold,),
            ("le",),
            cost_model=CostModel(rate=cost_rate),
            noise_std=noise_std,
            tiers={"BMI": 0, "Aspirin": 0, "s": 0, "Statin": 1, "Cancer": 2, "PSA": 3},
        )

    @classmethod
    def preset(cls, name: str, **kw) -> "HealthcareProblem":
        return cls(cancer_threshold=cls.PRESETS[name], **kw)

    def evaluate_batch_raw(self, X, s):
        X = np.atleast_2d(X)
        statin, psa, cancer = healthcare_eval(X[:, 0], X[:, 1], s)
        return np.column_stack([statin, psa]), cancer[:, None]


def branin(u):
    """Branin on the unit square (``x1 = 15 u1 - 5``, ``x2 = 15 u2``)."""
    u = np.atleast_2d(u)
    x1 = 15.0 * u[:, 0] - 5.0
    x2 = 15.0 * u[:, 1]
    return ((x2 - 5.1 / (4 * np.pi ** 2) * x1 ** 2 + 5.0 / np.pi * x1 - 6.0) ** 2
            + 10.0 * (1.0 - 1.0 / (8.0 * np.pi)) * np.cos(x1) + 10.0)


def currin(u):
    u = np.atleast_2d(u)
    x1, x2 = u[:, 0], u[:, 1]
    with np.errstate(divide="ignore"):
        factor = 1.0 - np.exp(-1.0 / (2.0 * x2))
    factor = np.where(x2 > 0, factor, 1.0)
    return factor * (2300 * x1 ** 3 + 1900 * x1 ** 2 + 2092 * x1 + 60) / (100 * x1 ** 3 + 500 * x1 ** 2 + 4 * x1 + 20)


def park1(u):
    u = np.atleast_2d(u)
    x1 = np.maximum(u[:, 0], 1e-6)
    x2, x3, x4 = u[:, 1], u[:, 2], u[:, 3]
    return x1 / 2.0 * (np.sqrt(1.0 + (x2 + x3 ** 2) * x4 / x1 ** 2) - 1.0) + (x1 + 3.0 * x4) * np.exp(1.0 + np.sin(x3))


def park2(u):
    u = np.atleast_2d(u)
    return 2.0 / 3.0 * np.exp(u[:, 0] + u[:, 1]) - u[:, 3] * np.sin(u[:, 2]) + u[:, 2]


class _BiasedSynthetic(BenchmarkProblem):
    """``f(x, s) = f(x, 1) + (1 - s) b(x)`` with per-objective smooth biases."""

    targets: tuple[Callable, ...] = ()
    biases: tuple[Callable, ...] = ()

    def __init__(self, d: int, names, noise_std: float = 0.0, cost_rate: float = 4.8, s_min: float = 0.0):
        super().__init__(
            ConfigSpace(np.tile([0.0, 1.0], (d, 1))),
            FidelitySpace(s_min=s_min),
            names,
            cost_model=CostModel(rate=cost_rate),
            noise_std=noise_std,
        )

    def evaluate_batch_raw(self, X, s):
        X = np.atleast_2d(X)
        Y = np.column_stack([f(X) + (1.0 - s) * b(X) for f, b in zip(self.targets, self.biases)])
        return Y, np.zeros((len(X), 0))


class BraninCurrinProblem(_BiasedSynthetic):
    """Branin and Currin on ``[0, 1]^2``.

    Biases: ``b_1(u) = 25 sin(pi u1) u2`` and ``b_2(u) = 2 cos(pi u2) u1``.
    """

    name = "branin-currin"
    oracle_grid = (200, 200)
    targets = (branin, currin)
    biases = (lambda u: 25.0 * np.sin(np.pi * u[:, 0]) * u[:, 1],
              lambda u: 2.0 * np.cos(np.pi * u[:, 1]) * u[:, 0])

    def __init__(self, **kw):
        super().__init__(2, ("branin", "currin"), **kw)


class ParkProblem(_BiasedSynthetic):
    """Park1 and Park2 on ``[0, 1]^4``.

    Biases: ``b_1(u) = 2 (u1 - 0.5)^2 + u2 u4`` and ``b_2(u) = 0.5 sin(pi u3) + 0.5 u1``.
    """

    name = "park"
    oracle_grid = (15, 15, 15, 15)
    targets = (park1, park2)
    biases = (lambda u: 2.0 * (u[:, 0] - 0.5) ** 2 + u[:, 1] * u[:, 3],
              lambda u: 0.5 * np.sin(np.pi * u[:, 2]) + 0.5 * u[:, 0])

    def __init__(self, **kw):
        super().__init__(4, ("park1", "park2"), **kw)


SPHERE_A = np.array([0.2, 0.2])
SPHERE_B = np.array([0.8, 0.8])


def two_sphere(X):
    X = np.atleast_2d(X)
    return np.column_stack([np.sum((X - SPHERE_A) ** 2, axis=1), np.sum((X - SPHERE_B) ** 2, axis=1)])


def bias_field(X):
    """``g(x) = sin(2 pi x1) cos(2 pi x2)``; ``max |g| = 1``."""
    X = np.atleast_2d(X)
    return np.sin(2 * np.pi * X[:, 0]) * np.cos(2 * np.pi * X[:, 1])


class AdversarialBiasProblem(BenchmarkProblem):
    """Two-sphere objectives on ``[0, 1]^2``; every fidelity below 1 adds ``delta_scale * g(x)``
    to both objectives."""

    name = "adversarial"
    oracle_grid = (200, 200)

    def __init__(self, delta_scale: float = 10.0, fidelities=(0.2, 0.5, 1.0), noise_std: float = 0.0,
                 cost_rate: float = 4.8):
        if delta_scale < 0:
            raise DomainError("delta_scale must be nonnegative")
        self.delta_scale = float(delta_scale)
        super().__init__(
            ConfigSpace(np.array([[0.0, 1.0], [0.0, 1.0]])),
            FidelitySpace(values=tuple(fidelities)),
            ("f1", "f2"),
            cost_model=CostModel(rate=cost_rate),
            noise_std=noise_std,
        )

    @cached_property
    def default_reference(self) -> np.ndarray:
        # bias-free target, so the reference does not depend on delta_scale
        return reference_from_observations(two_sphere(self.grid()))

    def bias(self, X, s) -> np.ndarray:
        applied = self.delta_scale * bias_field(X) if s < TARGET_FIDELITY else np.zeros(len(np.atleast_2d(X)))
        return np.column_stack([applied, applied])

    def evaluate_batch_raw(self, X, s):
        X = np.atleast_2d(X)
        return two_sphere(X) + self.bias(X, s), np.zeros((len(X), 0))


@dataclass(frozen=True)
class CollisionRiskInputs:
    max_vel_x: float
    decel_lim_x: float
    local_inflation_radius: float
    sim_time: float
    local_resolution: float
    goal_align_scale: float
    goal_dist_scale: float
    base_obstacle_scale: float
    vx_samples: float
    vtheta_samples: float


COLLISION_BOUNDS = {
    "max_vel_x": (0.1, 0.5),
    "decel_lim_x": (-4.0, -1.0),
    "local_inflation_radius": (0.3, 0.6),
    "sim_time": (1.0, 3.0),
    "local_resolution": (0.04, 0.1),
    "goal_align_scale": (10.0, 60.0),
    "goal_dist_scale": (10.0, 60.0),
    "base_obstacle_scale": (0.01, 0.1),
    "vx_samples": (10.0, 40.0),
    "vtheta_samples": (10.0, 40.0),
}


def _clip01(v):
    return np.maximum(0.0, np.minimum(v, 1.0))


def collision_risk_terms(inp: CollisionRiskInputs) -> dict:
    """Sub-scores of the collision-risk score (vectorizes over array fields)."""
    v = np.asarray(inp.max_vel_x, dtype=float)
    infl = np.asarray(inp.local_inflation_radius, dtype=float)
    r_speed = _clip01(v / (np.abs(inp.decel_lim_x) + 0.01) / 2.0)
    r_safety = 1.0 / (1.0 + infl / (v + 0.01))
    r_reaction = 1.0 / (1.0 + infl / (v * inp.sim_time + 0.01))
    r_perception = _clip01(inp.local_resolution / (infl + 0.01) / 0.5)
    r_goal = _clip01((inp.goal_align_scale + inp.goal_dist_scale) / (inp.base_obstacle_scale + 0.01) / 3.0)
    r_sampling = 1.0 / (1.0 + inp.vx_samples * inp.vtheta_samples / 200.0)
    return {"speed": r_speed, "safety": r_safety, "reaction": r_reaction,
            "perception": r_perception, "goal": r_goal, "sampling": r_sampling}


COLLISION_WEIGHTS = {"speed": 0.2, "safety": 0.3, "reaction": 0.2, "perception": 0.1, "goal": 0.15, "sampling": 0.05}


def collision_risk_score(inp: CollisionRiskInputs):
    """Weighted sum of the six sub-scores, scaled to [0, 10]."""
    terms = collision_risk_terms(inp)
    return 10.0 * sum(COLLISION_WEIGHTS[k] * terms[k] for k in COLLISION_WEIGHTS)


@dataclass
class OracleFront:
    front: ParetoFront
    hv_star: float
    X: np.ndarray
    Y: np.ndarray
    feasible: np.ndarray


def _violation(problem: BenchmarkProblem, H) -> np.ndarray:
    if problem.Q == 0:
        return np.zeros(len(H))
    sign = np.array([1.0 if d == "ge" else -1.0 for d in problem.directions])
    return np.sum(np.maximum(sign * (problem.thresholds - H), 0.0), axis=1)


def oracle_pareto(problem: BenchmarkProblem, grid_n=None, reference=None, refine: bool = True) -> OracleFront:
    """Target-fidelity front and its hypervolume ``HV*``.

    Starts from a dense grid. With ``refine`` the grid is augmented with an
    NSGA-II archive computed on the true target-fidelity functions, which
    recovers front segments lying on constraint boundaries between grid nodes.
    """
    X = problem.grid(grid_n)
    if refine:
        def objective(Z):
            Yz, Hz = problem.evaluate_batch(Z, TARGET_FIDELITY)
            return Yz, _violation(problem, Hz)

        res = nsga2_optimize(objective, problem.config_space, Nsga2Config(200, 100, seed=0))
        X = np.vstack([X, res.X])
    Y, H = problem.evaluate_batch(X, TARGET_FIDELITY)
    feas = problem.feasible(H)
    ref = np.asarray(problem.reference if reference is None else reference, dtype=float)
    Yf = Y[feas]
    front = ParetoFront(Yf, ref) if len(Yf) else ParetoFront(np.zeros((0, problem.M)), ref)
    hv = hypervolume(np.minimum(front.points, ref), ref) if len(front.points) else 0.0
    return OracleFront(front, hv, X, Y, feas)


REGISTRY: dict[str, Callable[..., BenchmarkProblem]] = {
    "healthcare": HealthcareProblem,
    "branin-currin": BraninCurrinProblem,
    "park": ParkProblem,
    "adversarial": AdversarialBiasProblem,
}


def make_problem(name: str, **params) -> BenchmarkProblem:
    if name not in REGISTRY:
        raise DomainError(f"unknown problem {name!r}; choose from {sorted(REGISTRY)}")
    if name == "healthcare" and "preset" in params:
        preset = params.pop("preset")
        return HealthcareProblem.preset(preset, **params)
    return REGISTRY[name](**params)
