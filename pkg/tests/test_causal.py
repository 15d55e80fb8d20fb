import math
import warnings

import numpy as np
import pytest
from scipy import stats

from rescue.causal import (AgnosticPrior, CausalGraph, CausalModel, LinearGaussianScm, Mechanism,
                           ObservationalDataset, build_causal_model, do_estimate, fisher_z_test, fit_scm,
                           pc_discover, should_update_cpm, update_cpm)
from rescue.core import ConfigSpace, Dataset, DomainError, Observation

CHAIN_TIERS = {"X": 0, "Z": 1, "Y": 2}


def chain_data(seed, n=2000):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    z = 2.0 * x + 0.5 * rng.standard_normal(n)
    y = 1.5 * z + 0.5 * rng.standard_normal(n)
    return ObservationalDataset(["X", "Z", "Y"], np.column_stack([x, z, y]))


def scm(edges, mech, tiers=None):
    nodes = list(mech)
    g = CausalGraph(nodes, edges, tiers or {n: k for k, n in enumerate(nodes)})
    return LinearGaussianScm(g, {n: Mechanism(list(p), np.asarray(w, float), b, v) for n, (p, w, b, v) in mech.items()})


def test_fisher_z_zero_correlation():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(50)
    a -= a.mean()
    b = rng.standard_normal(50)
    b -= b.mean()
    b -= a * (a @ b) / (a @ a)
    indep, p = fisher_z_test(ObservationalDataset(["a", "b"], np.column_stack([a, b])), "a", "b")
    assert indep and p == pytest.approx(1.0, abs=1e-9)


def test_fisher_z_closed_form():
    n = 100
    rng = np.random.default_rng(1)
    # orthonormal columns orthogonal to the constant give an exact sample correlation
    U, _ = np.linalg.qr(np.column_stack([np.ones(n), rng.standard_normal((n, 2))]))
    u, v = U[:, 1], U[:, 2]
    a, b = u, 0.5 * u + math.sqrt(0.75) * v
    stat = math.sqrt(n - 3) * math.atanh(0.5)
    assert stat == pytest.approx(5.4100, abs=1e-4)
    indep, p = fisher_z_test(ObservationalDataset(["a", "b"], np.column_stack([a, b])), "a", "b")
    assert not indep
    assert p == pytest.approx(2 * stats.norm.sf(stat), rel=1e-6)
    assert p == pytest.approx(6.3e-8, rel=0.05)


def test_fisher_z_conditional_independence_rate():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        c = rng.standard_normal(300)
        a = c + rng.standard_normal(300)
        b = c + rng.standard_normal(300)
        data = ObservationalDataset(["a", "b", "c"], np.column_stack([a, b, c]))
        hits += fisher_z_test(data, "a", "b", ["c"])[0]
        assert not fisher_z_test(data, "a", "b")[0]
    assert hits >= 90


def test_fisher_z_requires_enough_rows():
    data = ObservationalDataset(["a", "b", "c"], np.random.default_rng(0).standard_normal((4, 3)))
    with pytest.raises(DomainError):
        fisher_z_test(data, "a", "b", ["c"])


def test_fisher_z_singular_submatrix_warns():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(100)
    data = ObservationalDataset(["a", "b", "c"], np.column_stack([a, rng.standard_normal(100), a]))
    with pytest.warns(RuntimeWarning, match="ridge"):
        fisher_z_test(data, "a", "b", ["c"])


def test_pc_recovers_chain():
    hits = sum(pc_discover(chain_data(seed), CHAIN_TIERS).edges == {("X", "Z"), ("Z", "Y")} for seed in range(20))
    assert hits >= 18


def test_pc_same_tier_chain_skeleton():
    g = pc_discover(chain_data(0), {"X": 0, "Z": 0, "Y": 0})
    assert {frozenset(e) for e in g.edges} == {frozenset("XZ"), frozenset("ZY")}
    assert g.is_acyclic()


def test_pc_independent_columns_give_no_edges():
    rng = np.random.default_rng(2)
    data = ObservationalDataset(["a", "b"], rng.standard_normal((2000, 2)))
    assert pc_discover(data, {"a": 0, "b": 1}).edges == set()


def test_pc_never_emits_forbidden_edge():
    rng = np.random.default_rng(3)
    y = rng.standard_normal(2000)
    x = 3.0 * y + 0.1 * rng.standard_normal(2000)
    data = ObservationalDataset(["X", "Y"], np.column_stack([x, y]))
    g = pc_discover(data, {"X": 0, "Y": 2})
    assert ("Y", "X") not in g.edges and ("X", "Y") in g.edges
    assert not g.violations()


def test_pc_exogenous_has_no_parents():
    rng = np.random.default_rng(4)
    s = rng.random(1000)
    x = rng.random(1000)
    y = x + s + 0.1 * rng.standard_normal(1000)
    data = ObservationalDataset(["x", "s", "y"], np.column_stack([x, s, y]))
    g = pc_discover(data, {"x": 0, "s": 0, "y": 2}, exogenous=["s"])
    assert g.parents("s") == [] and set(g.parents("y")) == {"x", "s"}


def test_pc_requires_tiers():
    with pytest.raises(DomainError):
        pc_discover(chain_data(0), {"X": 0, "Z": 1})


def test_graph_json_roundtrip_and_validation():
    g = CausalGraph(["X", "Z", "Y"], [("X", "Z"), ("Z", "Y")], CHAIN_TIERS)
    assert CausalGraph.from_json(g.to_json()) == g
    cyc = CausalGraph(["a", "b"], [("a", "b"), ("b", "a")])
    with pytest.raises(DomainError):
        CausalGraph.from_json(cyc.to_json())
    bad = CausalGraph(["X", "Y"], [("Y", "X")], {"X": 0, "Y": 2})
    with pytest.raises(DomainError):
        CausalGraph.from_json(bad.to_json())
    with pytest.raises(DomainError):
        CausalGraph(["a"], [("a", "q")])


def test_fit_scm_source_moments():
    g = CausalGraph(["A"])
    m = fit_scm(g, ObservationalDataset(["A"], np.array([[1.0], [2.0], [3.0]]))).mechanisms["A"]
    assert m.intercept == 2.0 and m.variance == pytest.approx(2 / 3, abs=1e-15)


def test_fit_scm_noiseless_line():
    x = np.linspace(-2, 2, 50)
    g = CausalGraph(["X", "Y"], [("X", "Y")], {"X": 0, "Y": 2})
    m = fit_scm(g, ObservationalDataset(["X", "Y"], np.column_stack([x, 2 * x + 1]))).mechanisms["Y"]
    assert m.weights[0] == pytest.approx(2.0, abs=1e-12) and m.intercept == pytest.approx(1.0, abs=1e-12)
    assert m.variance <= 1e-12


def test_fit_scm_noisy_line():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(5000)
    y = 2 * x + 1 + rng.normal(0, 0.1, 5000)
    g = CausalGraph(["X", "Y"], [("X", "Y")], {"X": 0, "Y": 2})
    m = fit_scm(g, ObservationalDataset(["X", "Y"], np.column_stack([x, y]))).mechanisms["Y"]
    assert abs(m.weights[0] - 2.0) <= 0.05


def test_fit_scm_rank_deficient_uses_ridge():
    x = np.linspace(0, 1, 20)
    g = CausalGraph(["A", "B", "Y"], [("A", "Y"), ("B", "Y")], {"A": 0, "B": 0, "Y": 2})
    m = fit_scm(g, ObservationalDataset(["A", "B", "Y"], np.column_stack([x, x, 2 * x]))).mechanisms["Y"]
    assert m.weights.sum() == pytest.approx(2.0, abs=1e-4)


def test_do_estimate_deterministic_examples():
    line = scm([("X", "Y")], {"X": ([], [], 0.0, 1.0), "Y": (["X"], [2.0], 1.0, 0.0)})
    est = do_estimate(line, [3.0], 1.0, intervene=["X"], outputs=["Y"])
    assert est.mean[0] == 7.0 and est.std[0] == 0.0

    chain = scm([("X", "Z"), ("Z", "Y")], {"X": ([], [], 0.0, 1.0), "Z": (["X"], [2.0], 0.0, 0.0),
                                           "Y": (["Z"], [1.0], 1.0, 0.0)})
    assert do_estimate(chain, [1.0], 1.0, intervene=["X"], outputs=["Y"]).mean[0] == 3.0


@pytest.mark.parametrize("x", [-3.7, 0.0, 0.123456789, 11.5])
def test_do_estimate_exact_and_invariant_to_n_mc(x):
    chain = scm([("X", "Z"), ("Z", "Y")], {"X": ([], [], 0.0, 1.0), "Z": (["X"], [2.0], 0.5, 0.0),
                                           "Y": (["Z"], [-1.5], 1.0, 0.0)})
    want = -1.5 * (2.0 * x + 0.5) + 1.0
    for n_mc in (2, 17, 1000):
        got = do_estimate(chain, [x], 1.0, n_mc=n_mc, intervene=["X"], outputs=["Y"]).mean[0]
        assert abs(got - want) <= 1e-12


def test_do_estimate_gaussian_noise_moments():
    noisy = scm([("X", "Y")], {"X": ([], [], 0.0, 1.0), "Y": (["X"], [1.0], 0.0, 1.0)})
    est = do_estimate(noisy, [0.0], 1.0, n_mc=100_000, seed=1, intervene=["X"], outputs=["Y"])
    assert abs(est.mean[0]) <= 0.02 and abs(est.std[0] - 1.0) <= 0.02


def test_do_estimate_constant_in_absent_fidelity_and_seeded():
    noisy = scm([("X", "Y")], {"X": ([], [], 0.0, 1.0), "Y": (["X"], [1.0], 0.0, 1.0)})
    a = do_estimate(noisy, [0.5], 0.1, seed=3, intervene=["X"], outputs=["Y"])
    b = do_estimate(noisy, [0.5], 0.9, seed=3, intervene=["X"], outputs=["Y"])
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.std, b.std)


def test_do_estimate_clamps_fidelity():
    g = {"X": ([], [], 0.0, 1.0), "s": ([], [], 0.5, 0.1), "Y": (["X", "s"], [1.0, 10.0], 0.0, 0.0)}
    model = scm([("X", "Y"), ("s", "Y")], g, {"X": 0, "s": 0, "Y": 2})
    assert do_estimate(model, [1.0], 0.3, intervene=["X"], outputs=["Y"]).mean[0] == pytest.approx(4.0, abs=1e-12)


def test_do_estimate_errors():
    line = scm([("X", "Y")], {"X": ([], [], 0.0, 1.0), "Y": (["X"], [2.0], 1.0, 0.0)})
    with pytest.raises(DomainError):
        do_estimate(line, [3.0], 1.0, n_mc=1)
    with pytest.raises(DomainError):
        do_estimate(line, [3.0], 1.0, space=ConfigSpace(np.array([[0.0, 1.0]])))


def test_should_update_cpm():
    assert should_update_cpm(5, 5) and not should_update_cpm(4, 5) and should_update_cpm(10, 5)


def test_causal_model_matches_do_estimate_and_caches():
    model = build_causal_model(chain_data(0), CHAIN_TIERS, ["X"], ["Y"], n_mc=64, seed=2)
    X = np.array([[0.5], [1.0]])
    mean, std = model.estimate(X, 1.0)
    for k, x in enumerate(X):
        est = do_estimate(model.scm, x, 1.0, n_mc=64, seed=2, intervene=["X"], outputs=["Y"])
        assert mean[k, 0] == pytest.approx(est.mean[0], abs=1e-12)
        assert std[k, 0] == pytest.approx(est.std[0], abs=1e-12)
    assert len(model._cache) == 2
    mean2, _ = model.estimate(X, 1.0)
    assert np.array_equal(mean, mean2)
    back = CausalModel.from_dict(model.to_dict())
    assert np.allclose(back.estimate(X, 1.0)[0], mean)


def test_agnostic_prior_is_zero():
    m, s = AgnosticPrior(2).estimate(np.ones((3, 4)), 0.5)
    assert m.shape == (3, 2) and not m.any() and not s.any()


def test_update_cpm_is_deterministic_and_adds_edges():
    rng = np.random.default_rng(6)
    n = 40
    x = rng.standard_normal(n)
    y = 0.3 * x + rng.standard_normal(n)
    obs = ObservationalDataset(["x", "s", "y"], np.column_stack([x, np.ones(n), y]))
    base = build_causal_model(obs, {"x": 0, "s": 0, "y": 2}, ["x"], ["y"], graph=CausalGraph(
        ["x", "s", "y"], [], {"x": 0, "s": 0, "y": 2}, ["s"]))
    same_a = update_cpm(base, obs, Dataset())
    same_b = update_cpm(base, obs, Dataset())
    assert same_a.graph == same_b.graph

    ds = Dataset()
    for xi in np.linspace(-3, 3, 500):
        ds.append(Observation(x=[xi], s=float(rng.random()), y=[2.0 * xi + 0.1 * rng.standard_normal()], h=[], cost=1.0))
    grown = update_cpm(base, obs, ds)
    assert ("x", "y") in grown.graph.edges


def test_observational_csv_roundtrip(tmp_path):
    data = chain_data(1, n=10)
    data.to_csv(tmp_path / "obs.csv")
    back = ObservationalDataset.from_csv(tmp_path / "obs.csv")
    assert back.names == data.names and np.array_equal(back.data, data.data)
    with pytest.raises(DomainError):
        ObservationalDataset(["a"], np.array([[np.nan]]))


def test_discovery_output_always_acyclic_and_tier_consistent():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for seed in range(10):
            rng = np.random.default_rng(seed)
            data = ObservationalDataset(list("abcde"), rng.standard_normal((200, 5)) @ rng.standard_normal((5, 5)))
            tiers = dict(zip("abcde", rng.integers(0, 3, 5).tolist()))
            g = pc_discover(data, tiers)
            assert g.is_acyclic() and not g.violations()
