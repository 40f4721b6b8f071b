"""Sample-quality metrics: exact and sliced Wasserstein-2, moment discrepancies."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .measures import as_points, gmm_sample

ASSIGNMENT_CAP = 512
DEFAULT_PROJECTIONS = 128
METHODS = ("exact-1d", "exact-assignment", "sliced", "moment")


@dataclass(frozen=True)
class MetricReport:
    name: str
    value: float
    n_a: int
    n_b: int
    method: str
    projections: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError(f"metric value must be nonnegative, got {self.value}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")


def _pair(a, b):
    pa, pb = as_points(a), as_points(b)
    if pa.shape != pb.shape:
        raise ValueError(f"sample sets must have equal shape, got {pa.shape} and {pb.shape}")
    return pa, pb


def w2_exact(a, b, max_size: int = ASSIGNMENT_CAP) -> float:
    """Empirical W2 between equal-size point sets.

    1D: matched order statistics. d >= 2: optimal assignment on squared
    distances (Hungarian, O(n^3)), refused above ``max_size`` points.
    """
    pa, pb = _pair(a, b)
    if pa.shape[1] == 1:
        diff = np.sort(pa[:, 0]) - np.sort(pb[:, 0])
        return float(np.sqrt(np.mean(diff * diff)))
    if pa.shape[0] > max_size:
        raise ValueError(f"{pa.shape[0]} points exceeds the assignment cap {max_size}; use sliced_w2")
    cost = cdist(pa, pb, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def random_directions(d: int, count: int, rng: np.random.Generator) -> np.ndarray:
    theta = rng.standard_normal((count, d))
    return theta / np.linalg.norm(theta, axis=1, keepdims=True)


def sliced_w2(a, b, L: int = DEFAULT_PROJECTIONS, rng: np.random.Generator | None = None) -> float:
    """Root of the mean squared 1D W2 over L uniform random directions."""
    if L < 1:
        raise ValueError("need at least one projection")
    pa, pb = _pair(a, b)
    rng = np.random.default_rng(0) if rng is None else rng
    theta = random_directions(pa.shape[1], L, rng)
    proj_a = np.sort(pa @ theta.T, axis=0)
    proj_b = np.sort(pb @ theta.T, axis=0)
    return float(np.sqrt(np.mean((proj_a - proj_b) ** 2)))


def w2_report(a, b, metric: str = "exact", L: int = DEFAULT_PROJECTIONS, seed: int = 0,
              max_size: int = ASSIGNMENT_CAP) -> MetricReport:
    """W2 as a MetricReport. ``metric='exact'`` falls back to sliced above the assignment cap."""
    pa, pb = _pair(a, b)
    n, d = pa.shape
    if metric == "exact" and (d == 1 or n <= max_size):
        method = "exact-1d" if d == 1 else "exact-assignment"
        return MetricReport("w2", w2_exact(pa, pb, max_size), n, n, method, None, seed)
    if metric not in ("exact", "sliced"):
        raise ValueError(f"unknown metric {metric!r}")
    value = sliced_w2(pa, pb, L, np.random.default_rng(seed))
    return MetricReport("w2", value, n, n, "sliced", L, seed)


def moment_report(a, b) -> list:
    """Mean-difference inf-norm and per-dimension variance ratios var(b)/var(a)."""
    pa, pb = as_points(a), as_points(b)
    if pa.size == 0 or pb.size == 0:
        raise ValueError("empty sample set")
    if pa.shape[1] != pb.shape[1]:
        raise ValueError("dimension mismatch")
    na, nb = pa.shape[0], pb.shape[0]
    out = [MetricReport("mean_diff_inf", float(np.max(np.abs(pa.mean(0) - pb.mean(0)))), na, nb, "moment")]
    ratios = pb.var(axis=0) / pa.var(axis=0)
    for j, r in enumerate(ratios):
        out.append(MetricReport(f"var_ratio[{j}]", float(r), na, nb, "moment"))
    return out


def reference_rng(seed: int) -> np.random.Generator:
    """Stream for reference data draws, disjoint from the sampler streams of the same seed."""
    return np.random.default_rng([int(seed), 7])


def w2_to_mixture(points, gm, seed: int = 0, metric: str = "sliced", L: int = DEFAULT_PROJECTIONS,
                  max_size: int = ASSIGNMENT_CAP) -> MetricReport:
    """W2 between generated points and an equal-size reference draw from ``gm``."""
    pa = as_points(points)
    ref = gmm_sample(gm, pa.shape[0], reference_rng(seed)).points
    return w2_report(pa, ref, metric, L, seed=0, max_size=max_size)
