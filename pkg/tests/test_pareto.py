import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rescue.core import DomainError
from rescue.pareto import (ParetoFront, area_under_regret, dominates, hypervolume, hypervolume_2d_batch,
                           hypervolume_exact, hypervolume_mc, log_hv_regret, pareto_filter, pareto_mask,
                           reference_from_observations)

vec2 = st.tuples(st.integers(0, 5), st.integers(0, 5)).map(lambda t: np.array(t, dtype=float))
fronts = st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=12).map(np.array)


def grid_count_hv(P, r, n=400):
    """Cell-centre counting over the box [min, r] on an n x n grid."""
    lo = P.min(axis=0)
    xs = lo[0] + (np.arange(n) + 0.5) * (r[0] - lo[0]) / n
    ys = lo[1] + (np.arange(n) + 0.5) * (r[1] - lo[1]) / n
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    dom = np.zeros_like(gx, dtype=bool)
    for p in P:
        dom |= (gx >= p[0]) & (gy >= p[1])
    cell = (r[0] - lo[0]) * (r[1] - lo[1]) / n ** 2
    return dom.sum() * cell, cell


def brute_force_nondominated(P):
    keep = []
    for i, p in enumerate(P):
        if any(dominates(q, p) for q in P):
            continue
        if any(np.array_equal(p, P[k]) for k in keep):
            continue
        keep.append(i)
    return P[keep]


def test_dominance_examples():
    assert dominates((1, 2), (2, 3))
    assert not dominates((1, 3), (3, 1)) and not dominates((3, 1), (1, 3))
    assert not dominates((1, 2), (1, 2))
    with pytest.raises(DomainError):
        dominates((1, 2), (1, 2, 3))


@settings(max_examples=300, deadline=None)
@given(vec2, vec2, vec2)
def test_dominance_is_a_strict_partial_order(a, b, c):
    assert not dominates(a, a)
    assert not (dominates(a, b) and dominates(b, a))
    if dominates(a, b) and dominates(b, c):
        assert dominates(a, c)


def test_pareto_filter_examples():
    P = np.array([(1, 3), (3, 1), (2, 2), (3, 3)], dtype=float)
    assert pareto_filter(P).tolist() == [[1, 3], [2, 2], [3, 1]]
    assert pareto_filter([[4.0, 2.0]]).tolist() == [[4.0, 2.0]]
    assert pareto_filter(np.ones((5, 2))).tolist() == [[1.0, 1.0]]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=15),
       st.sampled_from([2, 3]))
def test_pareto_filter_matches_brute_force(rows, M):
    P = np.array(rows, dtype=float)[:, :M]
    got = pareto_filter(P)
    want = brute_force_nondominated(P)
    assert sorted(map(tuple, got)) == sorted(map(tuple, want))


def test_hypervolume_examples():
    assert hypervolume_exact([[1, 1]], [2, 2]) == 1.0
    assert hypervolume_exact([[1, 3], [3, 1]], [4, 4]) == 5.0
    assert hypervolume_exact([[1, 1, 1]], [2, 2, 2]) == 1.0
    assert hypervolume_exact(np.zeros((0, 2)), [1, 1]) == 0.0
    with pytest.raises(DomainError):
        hypervolume_exact([[0, 0, 0, 0]], [1, 1, 1, 1])


def test_hypervolume_2_points_matches_grid_count():
    hv, cell = grid_count_hv(np.array([[1.0, 3.0], [3.0, 1.0]]), np.array([4.0, 4.0]))
    assert hypervolume_exact([[1, 3], [3, 1]], [4, 4]) == pytest.approx(hv, abs=400 * cell)


def test_hypervolume_clips_points_outside_reference(caplog):
    with caplog.at_level(logging.WARNING, logger="rescue.pareto"):
        hv = hypervolume_exact([[1.0, 5.0], [1.0, 1.0]], [2.0, 2.0])
    assert hv == 1.0
    assert "clipping" in caplog.text


def test_exact_matches_grid_counting_on_random_fronts():
    rng = np.random.default_rng(0)
    r = np.array([1.1, 1.1])
    for _ in range(50):
        P = pareto_filter(rng.random((rng.integers(1, 15), 2)))
        hv, cell = grid_count_hv(P, r)
        # each front edge can misclassify at most one row or column of cells
        tol = 2 * 400 * cell * (len(P) + 1)
        assert abs(hypervolume_exact(P, r) - hv) <= tol


def test_exact_3d_matches_mc():
    rng = np.random.default_rng(1)
    P = pareto_filter(rng.random((20, 3)))
    est, se = hypervolume_mc(P, [1, 1, 1], n=400_000, seed=2)
    assert abs(hypervolume_exact(P, [1, 1, 1]) - est) <= 4 * se


def test_mc_examples():
    est, se = hypervolume_mc([[1, 1]], [2, 2], n=1_000_000, seed=0)
    assert abs(est - 1.0) <= 3 * se + 1e-12
    assert hypervolume_mc(np.zeros((0, 2)), [1, 1]) == (0.0, 0.0)
    with pytest.raises(DomainError):
        hypervolume_mc([[0, 0]], [1, 1], n=10)


def test_exact_and_mc_agree_within_three_standard_errors():
    rng = np.random.default_rng(3)
    ok = 0
    for trial in range(100):
        P = pareto_filter(rng.random((rng.integers(2, 10), 2)))
        est, se = hypervolume_mc(P, [1.0, 1.0], n=20_000, seed=trial)
        ok += abs(hypervolume_exact(P, [1.0, 1.0]) - est) <= 3 * se
    assert ok >= 99


@settings(max_examples=200, deadline=None)
@given(fronts, st.tuples(st.floats(0, 1), st.floats(0, 1)))
def test_adding_a_point_never_decreases_hv(P, new):
    r = np.array([1.0, 1.0])
    before = hypervolume_exact(P, r)
    after = hypervolume_exact(np.vstack([P, new]), r)
    assert after >= before - 1e-12


@settings(max_examples=200, deadline=None)
@given(fronts)
def test_dominated_points_do_not_contribute(P):
    r = np.array([1.0, 1.0])
    assert hypervolume_exact(P, r) == pytest.approx(hypervolume_exact(pareto_filter(P), r), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=8).map(np.array))
def test_3d_hv_monotone_and_filter_invariant(P):
    r = np.ones(3)
    hv = hypervolume_exact(P, r)
    assert hv == pytest.approx(hypervolume_exact(pareto_filter(P), r), abs=1e-12)
    assert hypervolume_exact(np.vstack([P, P.min(axis=0)]), r) >= hv - 1e-12


def test_batch_hv_matches_loop_and_ignores_nan():
    rng = np.random.default_rng(5)
    Y = rng.random((30, 12, 2))
    Y[3, 4] = np.nan
    r = np.array([1.0, 1.0])
    batch = hypervolume_2d_batch(Y, r)
    for b in range(len(Y)):
        rows = Y[b][~np.isnan(Y[b]).any(axis=1)]
        assert batch[b] == pytest.approx(hypervolume_exact(rows, r), abs=1e-12)


def test_hypervolume_dispatch_many_objectives():
    assert hypervolume([[0.5] * 4], [1.0] * 4) == pytest.approx(0.5 ** 4, abs=3e-3)


def test_pareto_front_type():
    f = ParetoFront(np.array([[1, 3], [3, 1], [3, 3]], dtype=float), [4, 4])
    assert len(f.points) == 2 and f.hypervolume() == 5.0


def test_pareto_mask_keeps_first_duplicate():
    P = np.array([[1, 1], [1, 1], [0, 2]], dtype=float)
    assert pareto_mask(P).tolist() == [True, False, True]
    P3 = np.array([[1, 1, 1], [1, 1, 1]], dtype=float)
    assert pareto_mask(P3).tolist() == [True, False]


@pytest.mark.parametrize("hv_star, inferred, expected", [(10, 9, 0.0), (10, 10, -12.0), (10, 9.9, -1.0)])
def test_log_regret_examples(hv_star, inferred, expected):
    assert log_hv_regret(hv_star, inferred) == pytest.approx(expected, abs=1e-12)


def test_log_regret_clamps_with_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="rescue.pareto"):
        assert log_hv_regret(1.0, 1.5) == -12.0
    assert "exceeds" in caplog.text


def test_area_under_regret_examples():
    assert area_under_regret([(0, 2), (10, 2)]) == 20.0
    assert area_under_regret([(0, 1), (10, 0)]) == 5.0
    assert area_under_regret([(0, 4), (5, 2), (10, 2)]) == 25.0
    assert area_under_regret([(0, 4)]) == 0.0
    with pytest.raises(DomainError):
        area_under_regret([(0, 1), (0, 2)])


def test_reference_from_observations():
    r = reference_from_observations([[0.0, 1.0], [1.0, 0.0]])
    assert np.allclose(r, [1.1, 1.1])
    P = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert all(dominates(p, r) for p in P)


def test_all_pairs_brute_force_small():
    pts = np.array(list(itertools.product(range(3), repeat=2)), dtype=float)
    assert pareto_filter(pts).tolist() == [[0.0, 0.0]]
