"""Causal performance model: PC discovery, linear-Gaussian SCM, do-estimates.

The graph is learned with the PC algorithm using Fisher-z partial
correlation tests. Tiers act as background knowledge: an edge may never
point from a higher tier to a lower one and nothing points into an
exogenous node (the fidelity). Mechanisms are fitted by least squares and
interventional means are estimated by forward sampling the mutilated model.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from rescue.core import ConfigSpace, Dataset, DomainError, StateError

log = logging.getLogger(__name__)

RIDGE = 1e-8
R_CLIP = 1.0 - 1e-12


class CausalGraph:
    """Directed graph over labelled nodes with tier annotations."""

    def __init__(self, nodes: Sequence[str], edges=(), tiers: Mapping[str, int] | None = None,
                 exogenous: Sequence[str] = ()):
        self.nodes = list(nodes)
        if len(set(self.nodes)) != len(self.nodes):
            raise DomainError("node names must be unique")
        self.tiers = {n: int((tiers or {}).get(n, 0)) for n in self.nodes}
        self.exogenous = frozenset(exogenous)
        self.edges = set()
        for a, b in edges:
            if a not in self.tiers or b not in self.tiers:
                raise DomainError(f"edge ({a}, {b}) references an unknown node")
            self.edges.add((a, b))

    def parents(self, node: str) -> list[str]:
        return [a for a in self.nodes if (a, node) in self.edges]

    def children(self, node: str) -> list[str]:
        return [b for b in self.nodes if (node, b) in self.edges]

    def topological_order(self) -> list[str]:
        indeg = {n: 0 for n in self.nodes}
        for _, b in self.edges:
            indeg[b] += 1
        ready = [n for n in self.nodes if indeg[n] == 0]
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for c in self.children(n):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != len(self.nodes):
            raise StateError("graph contains a cycle")
        return order

    def is_acyclic(self) -> bool:
        try:
            self.topological_order()
        except StateError:
            return False
        return True

    def violations(self) -> list[tuple[str, str]]:
        """Edges that break the tier order or point into an exogenous node."""
        return [(a, b) for a, b in sorted(self.edges)
                if self.tiers[a] > self.tiers[b] or b in self.exogenous]

    def to_json(self) -> str:
        return json.dumps({
            "nodes": [{"name": n, "tier": self.tiers[n]} for n in self.nodes],
            "edges": [list(e) for e in sorted(self.edges)],
            "exogenous": sorted(self.exogenous),
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CausalGraph":
        d = json.loads(text)
        nodes = [n["name"] for n in d["nodes"]]
        tiers = {n["name"]: n.get("tier", 0) for n in d["nodes"]}
        g = cls(nodes, [tuple(e) for e in d["edges"]], tiers, d.get("exogenous", ()))
        if not g.is_acyclic():
            raise DomainError("supplied DAG contains a cycle")
        if g.violations():
            raise DomainError(f"supplied DAG breaks tier constraints: {g.violations()}")
        return g

    def __eq__(self, other):
        return (isinstance(other, CausalGraph) and self.nodes == other.nodes
                and self.edges == other.edges and self.tiers == other.tiers)

    def __repr__(self):
        edges = ", ".join(f"{a}->{b}" for a, b in sorted(self.edges))
        return f"CausalGraph({edges})"


@dataclass
class ObservationalDataset:
    """Column-labelled real matrix; one row per sample."""

    names: list[str]
    data: np.ndarray

    def __post_init__(self):
        self.names = list(self.names)
        self.data = np.atleast_2d(np.asarray(self.data, dtype=float))
        if self.data.shape[1] != len(self.names):
            raise DomainError("column count does not match names")
        if not np.all(np.isfinite(self.data)):
            raise DomainError("observational data may not contain missing or non-finite values")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.names.index(name)]

    def select(self, names: Sequence[str]) -> np.ndarray:
        idx = [self.names.index(n) for n in names]
        return self.data[:, idx]

    def concat(self, other: "ObservationalDataset") -> "ObservationalDataset":
        return ObservationalDataset(self.names, np.vstack([self.data, other.select(self.names)]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.names)
            for row in self.data:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "ObservationalDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 2:
            raise DomainError(f"{path}: expected a header and at least one row")
        return cls(rows[0], np.array([[float(v) for v in r] for r in rows[1:]]))


def dataset_to_rows(ds: Dataset, names: Sequence[str]) -> ObservationalDataset:
    """Interventional records as rows ordered ``x..., s, h..., y...``."""
    X, S, Y, H, _ = ds.arrays()
    return ObservationalDataset(list(names), np.hstack([X, S[:, None], H, Y]))


class FisherZ:
    """Fisher-z conditional independence test on a fixed dataset."""

    def __init__(self, data: ObservationalDataset):
        self.data = data
        self.n = data.n
        X = data.data
        sd = X.std(axis=0)
        self.constant = sd <= 1e-12
        Xc = (X - X.mean(axis=0)) / np.where(self.constant, 1.0, sd)
        self.corr = (Xc.T @ Xc) / self.n
        np.fill_diagonal(self.corr, 1.0)

    def partial_correlation(self, i: int, j: int, cond: Sequence[int]) -> float:
        idx = [i, j, *cond]
        sub = self.corr[np.ix_(idx, idx)]
        try:
            if np.linalg.cond(sub) > 1e12:
                raise np.linalg.LinAlgError
            P = np.linalg.inv(sub)
        except np.linalg.LinAlgError:
            warnings.warn("singular correlation submatrix; ridge-regularizing", RuntimeWarning, stacklevel=3)
            P = np.linalg.inv(sub + RIDGE * np.eye(len(idx)))
        r = -P[0, 1] / np.sqrt(P[0, 0] * P[1, 1])
        return float(np.clip(r, -R_CLIP, R_CLIP))

    def test(self, i: int, j: int, cond: Sequence[int], alpha: float = 0.05):
        if self.n <= len(cond) + 3:
            raise DomainError(f"need n > |cond| + 3 (n={self.n}, |cond|={len(cond)})")
        if self.constant[i] or self.constant[j]:
            return True, 1.0
        r = self.partial_correlation(i, j, list(cond))
        stat = np.sqrt(self.n - len(cond) - 3) * np.arctanh(r)
        p = float(2.0 * stats.norm.sf(abs(stat)))
        return p > alpha, p


def fisher_z_test(data: ObservationalDataset, a: str, b: str, cond: Sequence[str] = (), alpha: float = 0.05):
    """Return ``(independent, p_value)`` for ``a`` _||_ ``b`` given ``cond``."""
    t = FisherZ(data)
    idx = data.names.index
    return t.test(idx(a), idx(b), [idx(c) for c in cond], alpha)


def _forbidden(tiers, exogenous, a, b) -> bool:
    return tiers[a] > tiers[b] or b in exogenous


def pc_discover(data: ObservationalDataset, tiers: Mapping[str, int], alpha: float = 0.05,
                exogenous: Sequence[str] = (), max_cond: int | None = None) -> CausalGraph:
    """PC-stable skeleton search followed by tier-aware orientation.

    Every column must have a tier. Pairs whose both directions are
    forbidden never enter the skeleton; cross-tier edges are oriented from
    the lower tier, same-tier edges through v-structures and Meek's first
    two rules, and leftovers by node order.
    """
    names = data.names
    missing = [n for n in names if n not in tiers]
    if missing:
        raise DomainError(f"tier missing for {missing}")
    exo = frozenset(exogenous)
    n_nodes = len(names)
    tester = FisherZ(data)
    adj = {i: set() for i in range(n_nodes)}
    for i, j in itertools.combinations(range(n_nodes), 2):
        a, b = names[i], names[j]
        if _forbidden(tiers, exo, a, b) and _forbidden(tiers, exo, b, a):
            continue
        adj[i].add(j)
        adj[j].add(i)
    sepset: dict[frozenset, set] = {}
    depth = 0
    limit = n_nodes - 2 if max_cond is None else max_cond
    while depth <= limit:
        snapshot = {i: set(v) for i, v in adj.items()}
        any_testable = False
        for i in range(n_nodes):
            for j in sorted(snapshot[i]):
                if j not in adj[i]:
                    continue
                others = sorted(snapshot[i] - {j})
                if len(others) < depth:
                    continue
                any_testable = True
                for cond in itertools.combinations(others, depth):
                    if data.n <= depth + 3:
                        break
                    indep, _ = tester.test(i, j, cond, alpha)
                    if indep:
                        adj[i].discard(j)
                        adj[j].discard(i)
                        sepset[frozenset((i, j))] = set(cond)
                        break
        if not any_testable:
            break
        depth += 1

    undirected = {frozenset((i, j)) for i in adj for j in adj[i]}
    directed: set[tuple[int, int]] = set()

    def orient(i, j):
        undirected.discard(frozenset((i, j)))
        directed.add((i, j))

    # background knowledge
    for e in sorted(undirected, key=sorted):
        i, j = sorted(e)
        a, b = names[i], names[j]
        if _forbidden(tiers, exo, a, b):
            orient(j, i)
        elif _forbidden(tiers, exo, b, a):
            orient(i, j)

    forced = set(directed)
    # v-structures on remaining undirected edges
    for c in range(n_nodes):
        nbrs = sorted(adj[c])
        for a, b in itertools.combinations(nbrs, 2):
            if b in adj[a] or c in sepset.get(frozenset((a, b)), {c}):
                continue
            for p in (a, b):
                if frozenset((p, c)) in undirected and not _forbidden(tiers, exo, names[p], names[c]):
                    orient(p, c)

    # Meek rules 1 and 2
    changed = True
    while changed:
        changed = False
        for e in sorted(undirected, key=sorted):
            i, j = sorted(e)
            for u, v in ((i, j), (j, i)):
                if frozenset((u, v)) not in undirected:
                    continue
                r1 = any((p, u) in directed and v not in adj[p] for p in range(n_nodes) if p != v)
                r2 = any((u, w) in directed and (w, v) in directed for w in range(n_nodes))
                if (r1 or r2) and not _forbidden(tiers, exo, names[u], names[v]):
                    orient(u, v)
                    changed = True

    def rank(i):
        return (tiers[names[i]], i)

    for e in sorted(undirected, key=sorted):
        i, j = sorted(e, key=rank)
        orient(i, j)

    graph = CausalGraph(names, [(names[i], names[j]) for i, j in directed], tiers, exo)
    if not graph.is_acyclic():
        # same-tier conflict: fall back to node order, which is acyclic by construction
        log.warning("orientation produced a cycle; resolving same-tier edges by node order")
        edges = set(forced)
        for i, j in directed - forced:
            edges.add((i, j) if rank(i) < rank(j) else (j, i))
        graph = CausalGraph(names, [(names[i], names[j]) for i, j in edges], tiers, exo)
    assert graph.is_acyclic() and not graph.violations()
    return graph


@dataclass
class Mechanism:
    parents: list[str]
    weights: np.ndarray
    intercept: float
    variance: float


@dataclass
class LinearGaussianScm:
    """``V_i = intercept + weights . pa(V_i) + N(0, variance)`` per node."""

    graph: CausalGraph
    mechanisms: dict[str, Mechanism]

    @property
    def order(self) -> list[str]:
        return self.graph.topological_order()

    def to_dict(self) -> dict:
        return {
            "graph": json.loads(self.graph.to_json()),
            "mechanisms": {n: {"parents": m.parents, "weights": m.weights.tolist(),
                               "intercept": m.intercept, "variance": m.variance}
                           for n, m in self.mechanisms.items()},
        }

    @classmethod
    def from_dict(cls, d) -> "LinearGaussianScm":
        g = CausalGraph.from_json(json.dumps(d["graph"]))
        mech = {n: Mechanism(m["parents"], np.asarray(m["weights"], float), m["intercept"], m["variance"])
                for n, m in d["mechanisms"].items()}
        return cls(g, mech)


def fit_scm(graph: CausalGraph, data: ObservationalDataset) -> LinearGaussianScm:
    """Least-squares fit of every node on its parents; sources get their moments."""
    if not graph.is_acyclic():
        raise DomainError("graph must be acyclic")
    mechanisms = {}
    for node in graph.nodes:
        y = data.column(node)
        pa = graph.parents(node)
        if not pa:
            mechanisms[node] = Mechanism([], np.zeros(0), float(y.mean()), float(y.var()))
            continue
        A = np.column_stack([np.ones(len(y)), data.select(pa)])
        AtA = A.T @ A
        if np.linalg.matrix_rank(A) < A.shape[1]:
            AtA = AtA + RIDGE * np.eye(A.shape[1])
            coef = np.linalg.solve(AtA, A.T @ y)
        else:
            coef = np.linalg.lstsq(A, y, rcond=None)[0]
        resid = y - A @ coef
        mechanisms[node] = Mechanism(pa, coef[1:], float(coef[0]), float(np.mean(resid ** 2)))
    return LinearGaussianScm(graph, mechanisms)


@dataclass(frozen=True)
class DoEstimate:
    mean: np.ndarray
    std: np.ndarray
    n_mc: int


def _forward(scm: LinearGaussianScm, clamp: Mapping[str, np.ndarray], outputs: Sequence[str],
             noise: np.ndarray):
    """Sample the mutilated model; returns ``{node: (n_query, n_mc)}`` for outputs."""
    n_q = len(next(iter(clamp.values()))) if clamp else 1
    values = {}
    node_index = {n: k for k, n in enumerate(scm.graph.nodes)}
    for node in scm.order:
        if node in clamp:
            values[node] = np.broadcast_to(np.asarray(clamp[node], float)[:, None], (n_q, noise.shape[0]))
            continue
        m = scm.mechanisms[node]
        v = np.full((n_q, noise.shape[0]), m.intercept)
        for w, p in zip(m.weights, m.parents):
            v = v + w * values[p]
        if m.variance > 0:
            v = v + np.sqrt(m.variance) * noise[:, node_index[node]][None, :]
        values[node] = v
    return {o: values[o] for o in outputs}


def do_estimate(scm: LinearGaussianScm, x, s: float, n_mc: int = 256, seed: int = 0,
                intervene: Sequence[str] | None = None, fidelity: str = "s",
                outputs: Sequence[str] | None = None, space: ConfigSpace | None = None) -> DoEstimate:
    """Monte Carlo mean and std of ``outputs`` under ``do(X=x, s=s)``."""
    if n_mc < 2:
        raise DomainError("n_mc must be at least 2")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if space is not None:
        space.check(x)
    intervene = list(intervene) if intervene is not None else [
        n for n in scm.graph.nodes if scm.graph.tiers[n] == 0 and n != fidelity][: len(x)]
    outputs = list(outputs) if outputs is not None else [
        n for n in scm.graph.nodes if n not in intervene and n != fidelity]
    noise = np.random.default_rng(seed).standard_normal((n_mc, len(scm.graph.nodes)))
    clamp = {n: np.array([v]) for n, v in zip(intervene, x)}
    if fidelity in scm.graph.nodes:
        clamp[fidelity] = np.array([float(s)])
    vals = _forward(scm, clamp, outputs, noise)
    mean = np.array([vals[o][0].mean() for o in outputs])
    std = np.array([vals[o][0].std(ddof=1) for o in outputs])
    return DoEstimate(mean, std, n_mc)


def should_update_cpm(t: int, cycle: int) -> bool:
    return cycle >= 1 and t % cycle == 0


@dataclass
class CausalModel:
    """Fitted CPM exposed as a vectorized prior: ``estimate(X, S) -> (mean, std)``.

    ``X`` holds configurations in original units, ``S`` the fidelity per row.
    Results are cached on a 1e-9 grid of ``(x, s)``.
    """

    graph: CausalGraph
    scm: LinearGaussianScm
    intervene: list[str]
    outputs: list[str]
    fidelity: str = "s"
    n_mc: int = 256
    seed: int = 0
    space: ConfigSpace | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._noise = np.random.default_rng(self.seed).standard_normal((self.n_mc, len(self.graph.nodes)))

    @property
    def n_outputs(self) -> int:
        return len(self.outputs)

    def estimate(self, X, S, chunk: int = 512):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        S = np.broadcast_to(np.asarray(S, dtype=float), (len(X),))
        if self.space is not None:
            self.space.check(X)
        keys = np.round(np.column_stack([X, S]) * 1e9).astype(np.int64)
        mean = np.empty((len(X), self.n_outputs))
        std = np.empty((len(X), self.n_outputs))
        todo = []
        for k, row in enumerate(keys):
            hit = self._cache.get(row.tobytes())
            if hit is None:
                todo.append(k)
            else:
                mean[k], std[k] = hit
        for start in range(0, len(todo), chunk):
            idx = todo[start:start + chunk]
            clamp = {n: X[idx, c] for c, n in enumerate(self.intervene) if n in self.graph.nodes}
            if self.fidelity in self.graph.nodes:
                clamp[self.fidelity] = S[idx]
            vals = _forward(self.scm, clamp, self.outputs, self._noise)
            for o, name in enumerate(self.outputs):
                v = vals[name]
                mean[idx, o] = v.mean(axis=1)
                std[idx, o] = v.std(axis=1, ddof=1)
            for k in idx:
                self._cache[keys[k].tobytes()] = (mean[k].copy(), std[k].copy())
        return mean, std

    def to_dict(self) -> dict:
        return {"scm": self.scm.to_dict(), "intervene": self.intervene, "outputs": self.outputs,
                "fidelity": self.fidelity, "n_mc": self.n_mc, "seed": self.seed}

    @classmethod
    def from_dict(cls, d, space: ConfigSpace | None = None) -> "CausalModel":
        scm = LinearGaussianScm.from_dict(d["scm"])
        return cls(scm.graph, scm, d["intervene"], d["outputs"], d["fidelity"], d["n_mc"], d["seed"], space)


class AgnosticPrior:
    """Zero prior mean and zero causal std: the plain multi-fidelity GP.

    ``centered`` tells the surrogate to apply the zero mean after output
    standardization, so the prior sits at the empirical output mean.
    """

    centered = True

    def __init__(self, n_outputs: int):
        self.n_outputs = n_outputs

    def estimate(self, X, S):
        n = len(np.atleast_2d(X))
        return np.zeros((n, self.n_outputs)), np.zeros((n, self.n_outputs))


def build_causal_model(data: ObservationalDataset, tiers: Mapping[str, int], intervene: Sequence[str],
                       outputs: Sequence[str], fidelity: str = "s", alpha: float = 0.05,
                       n_mc: int = 256, seed: int = 0, space: ConfigSpace | None = None,
                       graph: CausalGraph | None = None) -> CausalModel:
    """Discover (unless ``graph`` is given) and fit a CPM."""
    if graph is None:
        graph = pc_discover(data, tiers, alpha, exogenous=[fidelity] if fidelity in data.names else ())
    scm = fit_scm(graph, data)
    return CausalModel(graph, scm, list(intervene), list(outputs), fidelity, n_mc, seed, space)


def update_cpm(model: CausalModel, observational: ObservationalDataset, interventional: Dataset,
               alpha: float = 0.05, rediscover: bool = True) -> CausalModel:
    """Refit the CPM on observational rows plus interventional records (unweighted)."""
    data = observational
    if len(interventional):
        data = observational.concat(dataset_to_rows(interventional, observational.names))
    graph = pc_discover(data, model.graph.tiers, alpha, exogenous=model.graph.exogenous) if rediscover else model.graph
    scm = fit_scm(graph, data)
    return CausalModel(graph, scm, model.intervene, model.outputs, model.fidelity, model.n_mc, model.seed, model.space)


def load_graph(path) -> CausalGraph:
    return CausalGraph.from_json(Path(path).read_text())
