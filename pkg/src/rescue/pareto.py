"""Dominance, Pareto filtering, hypervolume and regret metrics (minimization)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from rescue.core import DomainError

log = logging.getLogger(__name__)

REGRET_FLOOR = 1e-12


def dominates(a, b) -> bool:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DomainError(f"length mismatch: {a.shape} vs {b.shape}")
    return bool(np.all(a <= b) and np.any(a < b))


def pareto_mask(points) -> np.ndarray:
    """Boolean mask of non-dominated rows; among exact duplicates only the first is kept."""
    P = np.asarray(points, dtype=float)
    n = len(P)
    if n == 0:
        return np.zeros(0, dtype=bool)
    P = P.reshape(n, -1)
    if P.shape[1] == 2:
        order = np.lexsort((P[:, 1], P[:, 0]))
        f2 = P[order, 1]
        prev_best = np.concatenate([[np.inf], np.minimum.accumulate(f2)[:-1]])
        keep = np.zeros(n, dtype=bool)
        keep[order] = f2 < prev_best
        return keep
    le = np.all(P[:, None, :] <= P[None, :, :], axis=2)
    lt = np.any(P[:, None, :] < P[None, :, :], axis=2)
    dominated = np.any(le & lt, axis=0)
    keep = ~dominated
    # drop later duplicates
    same = np.all(P[:, None, :] == P[None, :, :], axis=2)
    earlier_dup = np.triu(same, k=1).any(axis=0)
    return keep & ~earlier_dup


def pareto_filter(points) -> np.ndarray:
    """Non-dominated, deduplicated subset sorted by the first objective."""
    P = np.asarray(points, dtype=float)
    if P.size == 0:
        return P.reshape(0, P.shape[-1] if P.ndim > 1 else 0)
    P = np.atleast_2d(P)
    F = P[pareto_mask(P)]
    return F[np.lexsort(F.T[::-1])]


@dataclass
class ParetoFront:
    points: np.ndarray
    reference: np.ndarray

    def __post_init__(self):
        self.reference = np.asarray(self.reference, dtype=float)
        pts = np.asarray(self.points, dtype=float).reshape(-1, len(self.reference))
        self.points = pareto_filter(pts) if len(pts) else pts

    def hypervolume(self) -> float:
        return hypervolume_exact(self.points, self.reference)


def _hv2d_sorted(P: np.ndarray, r: np.ndarray) -> float:
    # P clipped to r, any order
    if len(P) == 0:
        return 0.0
    order = np.lexsort((P[:, 1], P[:, 0]))
    x = P[order, 0]
    y = np.minimum.accumulate(P[order, 1])
    x_next = np.append(x[1:], r[0])
    return float(np.sum((x_next - x) * (r[1] - y)))


def hypervolume_2d_batch(Y: np.ndarray, reference) -> np.ndarray:
    """Exact 2-D hypervolume for a batch of point sets, shape ``(B, n, 2)``.

    Rows containing NaN are ignored (use NaN to mask out candidates).
    """
    Y = np.asarray(Y, dtype=float)
    r = np.asarray(reference, dtype=float)
    Y = np.where(np.isnan(Y), r, np.minimum(Y, r))
    # sort by first objective, ties by second
    key = Y[..., 0] + 0.0
    order = np.lexsort((Y[..., 1], key), axis=-1)
    Ys = np.take_along_axis(Y, order[..., None], axis=-2)
    x = Ys[..., 0]
    y = np.minimum.accumulate(Ys[..., 1], axis=-1)
    x_next = np.concatenate([x[..., 1:], np.full(x.shape[:-1] + (1,), r[0])], axis=-1)
    return np.sum((x_next - x) * (r[1] - y), axis=-1)


def _hv3d(P: np.ndarray, r: np.ndarray) -> float:
    if len(P) == 0:
        return 0.0
    P = P[np.argsort(P[:, 2], kind="stable")]
    z = np.append(P[:, 2], r[2])
    total = 0.0
    for i in range(len(P)):
        depth = z[i + 1] - z[i]
        if depth > 0:
            total += _hv2d_sorted(P[: i + 1, :2], r[:2]) * depth
    return total


def hypervolume_exact(points, reference, warn: bool = True) -> float:
    """Exact hypervolume for M in {1, 2, 3}.

    Points that do not dominate the reference are clipped to it (and then
    contribute nothing along the offending axis).
    """
    r = np.asarray(reference, dtype=float)
    M = r.size
    P = np.asarray(points, dtype=float).reshape(-1, M)
    if M > 3:
        raise DomainError("exact hypervolume supports M <= 3; use hypervolume_mc")
    if len(P) == 0:
        return 0.0
    outside = np.any(P > r, axis=1)
    if warn and outside.any():
        log.warning("%d point(s) do not dominate the reference point; clipping", int(outside.sum()))
    P = np.minimum(P, r)
    if M == 1:
        return float(r[0] - P[:, 0].min())
    if M == 2:
        return _hv2d_sorted(P, r)
    return _hv3d(pareto_filter(P), r)


def hypervolume_mc(points, reference, n: int = 100_000, seed: int = 0):
    """Monte Carlo hypervolume, returns ``(estimate, std_error)``.

    Samples uniformly in the box spanned by the component-wise minimum of the
    front and the reference point.
    """
    if n < 100:
        raise DomainError("use at least 100 Monte Carlo samples")
    r = np.asarray(reference, dtype=float)
    P = np.asarray(points, dtype=float).reshape(-1, r.size)
    if len(P) == 0:
        return 0.0, 0.0
    P = pareto_filter(np.minimum(P, r))
    lo = P.min(axis=0)
    widths = r - lo
    box = float(np.prod(widths))
    if not box > 0:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    hits = 0
    block = 50_000
    done = 0
    while done < n:
        m = min(block, n - done)
        U = lo + rng.random((m, r.size)) * widths
        dom = np.zeros(m, dtype=bool)
        for p in P:
            dom |= np.all(U >= p, axis=1)
        hits += int(dom.sum())
        done += m
    p_hat = hits / n
    return box * p_hat, box * math.sqrt(p_hat * (1 - p_hat) / n)


def hypervolume(points, reference) -> float:
    r = np.asarray(reference, dtype=float)
    if r.size <= 3:
        return hypervolume_exact(points, r, warn=False)
    return hypervolume_mc(points, r, n=200_000)[0]


@dataclass(frozen=True)
class RegretRecord:
    hv_star: float
    inferred_hv: float
    log_regret: float
    cumulative_cost: float


def log_hv_regret(hv_star: float, inferred_hv: float) -> float:
    """log10 of the hypervolume gap, floored at 1e-12."""
    gap = hv_star - inferred_hv
    if gap < -1e-9:
        log.warning("inferred HV %.6g exceeds HV* %.6g; clamping", inferred_hv, hv_star)
    return math.log10(max(gap, REGRET_FLOOR))


def area_under_regret(curve) -> float:
    """Trapezoidal integral of regret against cumulative cost."""
    C = np.asarray(curve, dtype=float).reshape(-1, 2)
    if len(C) < 2:
        return 0.0
    if np.any(np.diff(C[:, 0]) <= 0):
        raise DomainError("cumulative costs must be strictly increasing")
    return float(np.trapezoid(C[:, 1], C[:, 0]))


def reference_from_observations(Y, margin: float = 0.1) -> np.ndarray:
    """Worst observed value per objective pushed outward by ``margin`` of the range."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    worst = Y.max(axis=0)
    span = worst - Y.min(axis=0)
    pad = np.where(span > 0, margin * span, margin * np.maximum(np.abs(worst), 1.0))
    return worst + pad
