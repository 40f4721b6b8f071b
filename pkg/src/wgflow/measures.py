"""Diagonal Gaussian mixtures with exact density, score and VP-diffused marginals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, ndtr, softmax

from .schedule import NoiseSchedule

WEIGHT_TOL = 1e-12
RENORM_TOL = 1e-6
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K, d)

    def __post_init__(self):
        w, m, v = self.weights, self.means, self.variances
        if w.ndim != 1 or m.ndim != 2 or v.shape != m.shape or m.shape[0] != w.shape[0]:
            raise ValueError(
                f"inconsistent shapes: weights {w.shape}, means {m.shape}, variances {v.shape}"
            )
        if w.shape[0] < 1 or m.shape[1] < 1:
            raise ValueError("need at least one component and one dimension")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
            raise ValueError("mixture parameters must be finite")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        if np.any(v <= 0):
            raise ValueError("variances must be positive")
        if abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
        for arr in (w, m, v):
            arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }


@dataclass(frozen=True, eq=False)
class SampleBatch:
    points: np.ndarray  # (n, d)
    time: float = 0.0

    def __post_init__(self):
        if self.points.ndim != 2:
            raise ValueError("points must be an (n, d) array")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("sample batch contains non-finite entries")
        if not 0.0 <= self.time <= 1.0:
            raise ValueError(f"time must lie in [0, 1], got {self.time}")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def as_points(x) -> np.ndarray:
    """Accept a SampleBatch or array-like and return an (n, d) float array."""
    if isinstance(x, SampleBatch):
        return x.points
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


def gmm_validate(weights, means, variances) -> GaussianMixture:
    """Build a mixture from raw arrays.

    Weights within 1e-6 of summing to one are renormalized; anything further
    off is rejected.
    """
    w = np.array(weights, dtype=float)
    m = np.array(means, dtype=float)
    v = np.array(variances, dtype=float)
    if m.ndim == 1:
        m = m[:, None]
    if v.ndim == 1:
        v = v[:, None]
    if w.ndim != 1 or m.shape != v.shape or m.shape[0] != w.shape[0]:
        raise ValueError(
            f"inconsistent shapes: weights {w.shape}, means {m.shape}, variances {v.shape}"
        )
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    total = w.sum()
    if abs(total - 1.0) > RENORM_TOL:
        raise ValueError(f"weights sum to {total!r}; off by more than {RENORM_TOL}")
    return GaussianMixture(w / total, m, v)


def standard_normal(d: int) -> GaussianMixture:
    if d < 1:
        raise ValueError("dimension must be >= 1")
    return GaussianMixture(np.ones(1), np.zeros((1, d)), np.ones((1, d)))


def _component_log_pdf(gm: GaussianMixture, x: np.ndarray) -> np.ndarray:
    # (n, K) log N(x; m_k, diag v_k), quadratic form expanded into matmuls
    prec = 1.0 / gm.variances
    quad = (x * x) @ prec.T - 2.0 * x @ (gm.means * prec).T
    quad += np.sum(gm.means * gm.means * prec, axis=1)[None, :]
    logdet = np.sum(np.log(gm.variances), axis=1)
    return -0.5 * (quad + logdet[None, :] + gm.dim * LOG_2PI)


def _prepare(gm: GaussianMixture, x):
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    pts = arr[None, :] if single else arr
    if pts.ndim != 2 or pts.shape[1] != gm.dim:
        raise ValueError(f"expected points of dimension {gm.dim}, got shape {arr.shape}")
    return pts, single


def gmm_log_density(gm: GaussianMixture, x):
    """log mu(x) for a d-vector (returns float) or an (n, d) array."""
    pts, single = _prepare(gm, x)
    out = logsumexp(_component_log_pdf(gm, pts) + np.log(gm.weights)[None], axis=1)
    return float(out[0]) if single else out


def gmm_score(gm: GaussianMixture, x):
    """Exact grad log mu(x) as responsibility-weighted component scores."""
    pts, single = _prepare(gm, x)
    resp = softmax(_component_log_pdf(gm, pts) + np.log(gm.weights)[None], axis=1)
    prec = 1.0 / gm.variances
    out = resp @ (gm.means * prec) - pts * (resp @ prec)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite score; component variance underflow?")
    return out[0] if single else out


def gmm_sample(gm: GaussianMixture, n: int, rng: np.random.Generator) -> SampleBatch:
    if n < 1:
        raise ValueError("n must be >= 1")
    comp = rng.choice(gm.n_components, size=n, p=gm.weights)
    z = rng.standard_normal((n, gm.dim))
    pts = gm.means[comp] + np.sqrt(gm.variances[comp]) * z
    return SampleBatch(pts, 0.0)


def gmm_quantiles(gm: GaussianMixture, probs) -> np.ndarray:
    """Inverse CDF of a 1D mixture by bisection, vectorized over ``probs`` in (0, 1)."""
    if gm.dim != 1:
        raise ValueError("quantiles are defined for 1D mixtures only")
    p = np.asarray(probs, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    m, sd = gm.means[:, 0], np.sqrt(gm.variances[:, 0])
    lo = np.full(p.shape, float(np.min(m - 40 * sd)))
    hi = np.full(p.shape, float(np.max(m + 40 * sd)))
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        below = ndtr((mid[..., None] - m) / sd) @ gm.weights < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def gmm_diffuse_integral(gm: GaussianMixture, b: float) -> GaussianMixture:
    """Marginal after accumulated drift integral ``b`` of the VP forward SDE."""
    if not b >= 0.0:
        raise ValueError("accumulated integral must be nonnegative")
    scale = np.exp(-b)
    noise = -np.expm1(-2.0 * b)
    return GaussianMixture(
        gm.weights.copy(), gm.means * scale, gm.variances * scale * scale + noise
    )


def gmm_diffuse(gm: GaussianMixture, t: float, schedule: NoiseSchedule) -> GaussianMixture:
    """Exact time-t marginal of dx = -beta x dt + sqrt(2 beta) dw started at gm."""
    return gmm_diffuse_integral(gm, float(schedule.beta_integral(t)))


def _ring(k: int, radius: float, var: float) -> GaussianMixture:
    ang = 2.0 * np.pi * np.arange(k) / k
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return gmm_validate(np.full(k, 1.0 / k), means, np.full((k, 2), var))


PRESETS = ("gmm-1d-bimodal", "gmm-2d-ring8", "std-normal-d")


def preset(name: str, dim: int | None = None) -> GaussianMixture:
    if name == "gmm-1d-bimodal":
        return gmm_validate([0.5, 0.5], [[-2.0], [2.0]], [[0.25], [0.25]])
    if name == "gmm-2d-ring8":
        return _ring(8, 4.0, 0.09)
    if name == "std-normal-d":
        return standard_normal(2 if dim is None else int(dim))
    raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")


def mixture_from_config(spec) -> GaussianMixture:
    """Resolve a config entry: preset name, {"preset": ..., "dim": ...} or raw arrays."""
    if isinstance(spec, str):
        return preset(spec)
    if isinstance(spec, dict):
        if "preset" in spec:
            return preset(spec["preset"], spec.get("dim"))
        missing = {"weights", "means", "variances"} - set(spec)
        if missing:
            raise ValueError(f"custom mixture missing fields: {sorted(missing)}")
        return gmm_validate(spec["weights"], spec["means"], spec["variances"])
    raise ValueError(f"cannot interpret mixture config {spec!r}")
