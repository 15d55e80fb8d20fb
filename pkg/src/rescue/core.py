"""Shared vocabulary: spaces, observations, datasets, problems and costs.

Objectives are minimized internally. A problem whose natural objectives are
maximized declares that through ``maximize`` flags and the values are negated
when they enter the library (see :meth:`Problem.evaluate`).
"""

from __future__ import annotations

import abc
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

TARGET_FIDELITY = 1.0
STD_FLOOR = 1e-9


class DomainError(ValueError):
    """An input lies outside the domain an operation is defined on."""


class StateError(RuntimeError):
    """An operation was called on an object in an unusable state."""


@dataclass(frozen=True)
class ConfigSpace:
    """Box-shaped configuration space.

    Bounds are closed intervals; ``bounds`` has shape ``(d, 2)``.
    """

    bounds: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        b = np.atleast_2d(np.asarray(self.bounds, dtype=float))
        if b.ndim != 2 or b.shape[1] != 2 or b.shape[0] < 1:
            raise DomainError(f"bounds must have shape (d, 2), got {b.shape}")
        if not np.all(b[:, 0] < b[:, 1]):
            raise DomainError("every lower bound must be strictly below its upper bound")
        b.setflags(write=False)
        object.__setattr__(self, "bounds", b)
        names = tuple(self.names) if self.names else tuple(f"x{i + 1}" for i in range(len(b)))
        if len(names) != len(b):
            raise DomainError("one name per dimension is required")
        object.__setattr__(self, "names", names)

    @property
    def dims(self) -> int:
        return self.bounds.shape[0]

    @property
    def lower(self) -> np.ndarray:
        return self.bounds[:, 0]

    @property
    def upper(self) -> np.ndarray:
        return self.bounds[:, 1]

    def contains(self, x, atol: float = 1e-12) -> bool:
        x = np.asarray(x, dtype=float)
        span = self.upper - self.lower
        return bool(
            np.all(np.isfinite(x))
            and np.all(x >= self.lower - atol * span)
            and np.all(x <= self.upper + atol * span)
        )

    def check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dims:
            raise DomainError(f"expected {self.dims} components, got {x.shape[-1]}")
        pts = x.reshape(-1, self.dims)
        tol = 1e-12 * (self.upper - self.lower)
        ok = np.isfinite(pts).all(axis=1) & (pts >= self.lower - tol).all(axis=1) & (pts <= self.upper + tol).all(axis=1)
        if not ok.all():
            p = pts[np.flatnonzero(~ok)[0]]
            raise DomainError(f"configuration {p} outside bounds {self.bounds.tolist()}")
        return x

    def normalize(self, x) -> np.ndarray:
        x = self.check(x)
        return (x - self.lower) / (self.upper - self.lower)

    def denormalize(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return self.lower + u * (self.upper - self.lower)

    def to_dict(self) -> dict:
        return {"bounds": self.bounds.tolist(), "names": list(self.names)}


def normalize_config(space: ConfigSpace, x) -> np.ndarray:
    """Affine map of ``x`` into the unit cube; raises DomainError out of bounds."""
    return space.normalize(x)


def denormalize_config(space: ConfigSpace, u) -> np.ndarray:
    return space.denormalize(u)


@dataclass(frozen=True)
class FidelitySpace:
    """Either a sorted set of discrete fidelities or the interval ``[s_min, 1]``."""

    values: tuple[float, ...] | None = None
    s_min: float = 0.0
    target: float = TARGET_FIDELITY

    def __post_init__(self):
        if self.values is not None:
            vals = tuple(sorted(float(v) for v in self.values))
            if not vals:
                raise DomainError("a discrete fidelity space needs at least one value")
            if vals[0] <= 0.0 or vals[-1] > 1.0:
                raise DomainError("discrete fidelities must lie in (0, 1]")
            if self.target not in vals:
                raise DomainError("the target fidelity must be one of the discrete values")
            object.__setattr__(self, "values", vals)
        elif not 0.0 <= self.s_min < self.target:
            raise DomainError("continuous fidelity needs 0 <= s_min < 1")

    @property
    def discrete(self) -> bool:
        return self.values is not None

    @property
    def lowest(self) -> float:
        return self.values[0] if self.discrete else self.s_min

    def contains(self, s: float) -> bool:
        if not math.isfinite(s):
            return False
        if self.discrete:
            return any(abs(s - v) <= 1e-12 for v in self.values)
        return self.s_min - 1e-12 <= s <= self.target + 1e-12

    def levels(self, n_continuous: int = 8) -> np.ndarray:
        """Fidelities offered to the acquisition optimizer."""
        if self.discrete:
            return np.asarray(self.values)
        return np.linspace(self.s_min, self.target, n_continuous)

    def to_dict(self) -> dict:
        if self.discrete:
            return {"kind": "discrete", "values": list(self.values)}
        return {"kind": "continuous", "min": self.s_min}

    @classmethod
    def from_dict(cls, d) -> "FidelitySpace":
        if isinstance(d, (list, tuple)):
            return cls(values=tuple(d))
        if d.get("kind") == "discrete":
            return cls(values=tuple(d["values"]))
        return cls(s_min=float(d.get("min", 0.0)))


@dataclass(frozen=True)
class CostModel:
    """Evaluation cost ``c(x, s)``.

    ``form`` is ``"exponential"`` (``exp(rate * s)``), ``"table"`` (lookup by
    fidelity) or ``"custom"`` (any positive callable of ``(x, s)``).
    """

    form: str = "exponential"
    rate: float = 4.8
    table: Mapping[float, float] | None = None
    fn: Callable[[np.ndarray, float], float] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.form not in ("exponential", "table", "custom"):
            raise DomainError(f"unknown cost form {self.form!r}")
        if self.form == "table" and not self.table:
            raise DomainError("table cost model needs a non-empty table")
        if self.form == "custom" and self.fn is None:
            raise DomainError("custom cost model needs a callable")

    def __call__(self, x, s: float) -> float:
        s = float(s)
        if not math.isfinite(s):
            raise DomainError(f"non-finite fidelity {s}")
        if self.form == "exponential":
            return math.exp(self.rate * s)
        if self.form == "table":
            for key, val in self.table.items():
                if abs(float(key) - s) <= 1e-12:
                    return float(val)
            raise DomainError(f"fidelity {s} missing from cost table")
        c = float(self.fn(np.asarray(x, dtype=float), s))
        if not c > 0:
            raise DomainError("custom cost must be positive")
        return c

    def to_dict(self) -> dict:
        if self.form == "exponential":
            return {"form": "exponential", "rate": self.rate}
        if self.form == "table":
            return {"form": "table", "table": [[float(k), float(v)] for k, v in self.table.items()]}
        return {"form": "custom"}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CostModel":
        form = d.get("form", "exponential")
        if form == "exponential":
            return cls(rate=float(d.get("rate", 4.8)))
        if form == "table":
            return cls(form="table", table={float(k): float(v) for k, v in d["table"]})
        raise DomainError("custom cost models cannot be loaded from JSON")


def cost(model: CostModel, x, s: float) -> float:
    return model(x, s)


@dataclass(frozen=True)
class Observation:
    x: np.ndarray
    s: float
    y: np.ndarray
    h: np.ndarray
    cost: float

    def __post_init__(self):
        for name in ("x", "y", "h"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.h))):
            raise DomainError("observations must be finite")
        if not self.cost > 0:
            raise DomainError("observation cost must be positive")


class Dataset:
    """Ordered list of observations with exact running cost.

    Single writer. The cumulative cost is recomputed with ``math.fsum`` on
    every append so it always equals the (correctly rounded) sum of costs.
    """

    def __init__(self, records: Iterable[Observation] = ()):
        self._records: list[Observation] = []
        self._costs: list[float] = []
        self.cumulative_cost = 0.0
        for r in records:
            self.append(r)

    def append(self, obs: Observation) -> None:
        self._records.append(obs)
        self._costs.append(obs.cost)
        self.cumulative_cost = math.fsum(self._costs)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def __getitem__(self, i):
        return self._records[i]

    @property
    def records(self) -> list[Observation]:
        return list(self._records)

    def copy(self) -> "Dataset":
        return Dataset(self._records)

    def arrays(self):
        """Stack into ``(X, s, Y, H, costs)`` arrays."""
        if not self._records:
            raise StateError("dataset is empty")
        X = np.vstack([r.x for r in self._records])
        S = np.array([r.s for r in self._records])
        Y = np.vstack([r.y for r in self._records])
        H = np.vstack([r.h for r in self._records]) if self._records[0].h.size else np.zeros((len(self), 0))
        return X, S, Y, H, np.array(self._costs)

    def subset(self, mask) -> "Dataset":
        return Dataset(r for r, keep in zip(self._records, mask) if keep)


def standardize_outputs(ds: Dataset):
    """Per-objective zero mean / unit (population) variance.

    Returns ``(means, stds, transformed)``. Constant columns get the std floor
    so they map to zeros.
    """
    if len(ds) == 0:
        raise StateError("cannot standardize an empty dataset")
    _, _, Y, _, _ = ds.arrays()
    means = Y.mean(axis=0)
    stds = np.maximum(Y.std(axis=0), STD_FLOOR)
    out = Dataset(replace(r, y=(r.y - means) / stds) for r in ds)
    return means, stds, out


class Problem(abc.ABC):
    """A multi-fidelity multi-objective black box.

    Subclasses implement :meth:`_evaluate_raw` returning the natural
    objective values and constraint metrics. :meth:`evaluate` converts to the
    internal minimization convention and adds optional observation noise.
    """

    name = "problem"

    def __init__(
        self,
        config_space: ConfigSpace,
        fidelity_space: FidelitySpace,
        objective_names: Sequence[str],
        constraint_names: Sequence[str] = (),
        thresholds: Sequence[float] = (),
        directions: Sequence[str] = (),
        maximize: Sequence[bool] | None = None,
        cost_model: CostModel | None = None,
        noise_std: float = 0.0,
        reference_point=None,
        tiers: Mapping[str, int] | None = None,
    ):
        self.config_space = config_space
        self.fidelity_space = fidelity_space
        self.objective_names = tuple(objective_names)
        self.constraint_names = tuple(constraint_names)
        self.thresholds = np.asarray(thresholds, dtype=float)
        self.directions = tuple(directions)
        self.maximize = tuple(maximize) if maximize is not None else (False,) * len(self.objective_names)
        self.cost_model = cost_model or CostModel()
        self.noise_std = float(noise_std)
        self.reference_point = None if reference_point is None else np.asarray(reference_point, float)
        if len(self.maximize) != self.M:
            raise DomainError("one maximize flag per objective")
        if len(self.thresholds) != self.Q or len(self.directions) != self.Q:
            raise DomainError("one threshold and one direction per constraint")
        if any(d not in ("ge", "le") for d in self.directions):
            raise DomainError("constraint directions must be 'ge' or 'le'")
        self._tiers = dict(tiers) if tiers else None

    @property
    def M(self) -> int:
        return len(self.objective_names)

    @property
    def Q(self) -> int:
        return len(self.constraint_names)

    @property
    def d(self) -> int:
        return self.config_space.dims

    @property
    def fidelity_name(self) -> str:
        return "s"

    @property
    def tiers(self) -> dict[str, int]:
        """Causal tier per node: configuration and fidelity 0, constraints 1, objectives 2."""
        if self._tiers is not None:
            return dict(self._tiers)
        t = {n: 0 for n in self.config_space.names}
        t[self.fidelity_name] = 0
        t.update({n: 1 for n in self.constraint_names})
        t.update({n: 2 for n in self.objective_names})
        return t

    @property
    def node_names(self) -> list[str]:
        return [*self.config_space.names, self.fidelity_name, *self.constraint_names, *self.objective_names]

    @abc.abstractmethod
    def _evaluate_raw(self, x: np.ndarray, s: float) -> tuple[np.ndarray, np.ndarray]:
        ...

    def evaluate_batch_raw(self, X: np.ndarray, s: float) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized raw evaluation; subclasses override when cheap."""
        out = [self._evaluate_raw(x, s) for x in np.atleast_2d(X)]
        Y = np.array([o[0] for o in out], dtype=float)
        H = np.array([o[1] for o in out], dtype=float).reshape(len(out), self.Q)
        return Y, H

    def to_internal(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        sign = np.where(self.maximize, -1.0, 1.0)
        return y * sign

    def evaluate(self, x, s: float, rng: np.random.Generator | None = None):
        """Return ``(y, h)`` with ``y`` in the minimization convention."""
        x = self.config_space.check(x)
        if not self.fidelity_space.contains(s):
            raise DomainError(f"fidelity {s} outside the fidelity space")
        y, h = self._evaluate_raw(np.asarray(x, dtype=float), float(s))
        y = self.to_internal(y)
        h = np.asarray(h, dtype=float).reshape(self.Q)
        if self.noise_std > 0 and rng is not None:
            y = y + rng.normal(0.0, self.noise_std, size=y.shape)
        return y, h

    def evaluate_batch(self, X, s: float):
        """Noise-free vectorized evaluation in the internal convention."""
        Y, H = self.evaluate_batch_raw(np.atleast_2d(np.asarray(X, dtype=float)), float(s))
        return self.to_internal(Y), H

    def observe(self, x, s: float, rng: np.random.Generator | None = None) -> Observation:
        y, h = self.evaluate(x, s, rng)
        return Observation(x=x, s=s, y=y, h=h, cost=self.cost_model(x, s))

    def feasible(self, H) -> np.ndarray:
        """Boolean feasibility per row of constraint metrics."""
        H = np.atleast_2d(np.asarray(H, dtype=float))
        if self.Q == 0:
            return np.ones(H.shape[0], dtype=bool)
        ok = np.ones(H.shape[0], dtype=bool)
        for q, (gamma, direction) in enumerate(zip(self.thresholds, self.directions)):
            ok &= H[:, q] >= gamma if direction == "ge" else H[:, q] <= gamma
        return ok

    def spec(self) -> "ProblemSpec":
        return ProblemSpec(
            name=self.name,
            bounds=self.config_space.bounds.tolist(),
            names=list(self.config_space.names),
            fidelities=self.fidelity_space.to_dict(),
            objectives=list(self.objective_names),
            constraints=list(self.constraint_names),
            thresholds=self.thresholds.tolist(),
            directions=list(self.directions),
            maximize=list(self.maximize),
            cost=self.cost_model.to_dict(),
        )


@dataclass
class ProblemSpec:
    """Static, JSON-serializable description of a problem's spaces.

    Schema::

        {"name": str, "dims": d, "bounds": [[lo, hi], ...], "names": [...],
         "fidelities": {"kind": "discrete", "values": [...]} | {"kind": "continuous", "min": s},
         "M": int, "Q": int, "objectives": [...], "constraints": [...],
         "thresholds": [...], "directions": ["ge"|"le", ...], "maximize": [...],
         "cost": {"form": "exponential", "rate": k} | {"form": "table", "table": [[s, c], ...]}}
    """

    name: str
    bounds: list
    names: list
    fidelities: dict
    objectives: list
    constraints: list = field(default_factory=list)
    thresholds: list = field(default_factory=list)
    directions: list = field(default_factory=list)
    maximize: list = field(default_factory=list)
    cost: dict = field(default_factory=lambda: {"form": "exponential", "rate": 4.8})

    @property
    def dims(self) -> int:
        return len(self.bounds)

    def to_json(self) -> str:
        d = {
            "name": self.name,
            "dims": self.dims,
            "bounds": self.bounds,
            "names": self.names,
            "fidelities": self.fidelities,
            "M": len(self.objectives),
            "Q": len(self.constraints),
            "objectives": self.objectives,
            "constraints": self.constraints,
            "thresholds": self.thresholds,
            "directions": self.directions,
            "maximize": self.maximize,
            "cost": self.cost,
        }
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ProblemSpec":
        d = json.loads(text)
        if d.get("dims", len(d["bounds"])) != len(d["bounds"]):
            raise DomainError("dims does not match bounds")
        objectives = d.get("objectives") or [f"y{i + 1}" for i in range(d["M"])]
        constraints = d.get("constraints") or [f"h{i + 1}" for i in range(d.get("Q", 0))]
        if len(objectives) != d.get("M", len(objectives)) or len(constraints) != d.get("Q", len(constraints)):
            raise DomainError("M/Q do not match the listed names")
        return cls(
            name=d.get("name", "problem"),
            bounds=d["bounds"],
            names=d.get("names") or [f"x{i + 1}" for i in range(len(d["bounds"]))],
            fidelities=d["fidelities"],
            objectives=objectives,
            constraints=constraints,
            thresholds=d.get("thresholds", []),
            directions=d.get("directions", []),
            maximize=d.get("maximize") or [False] * len(objectives),
            cost=d.get("cost", {"form": "exponential", "rate": 4.8}),
        )

    def config_space(self) -> ConfigSpace:
        return ConfigSpace(np.asarray(self.bounds, float), tuple(self.names))

    def fidelity_space(self) -> FidelitySpace:
        return FidelitySpace.from_dict(self.fidelities)

    def cost_model(self) -> CostModel:
        return CostModel.from_dict(self.cost)
