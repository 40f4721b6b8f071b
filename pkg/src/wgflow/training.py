"""Training loops: denoising score matching, the Wasserstein-gradient estimator,
and the projection model used by predict-project sampling.

All three minimize a minibatch average with Adam on the manual-backprop MLP.
Given a seed, the rng stream, and with it every checkpoint, is deterministic.
Each trainer returns the model; pass a list as ``losses`` to collect the
per-iteration objective.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .measures import GaussianMixture, as_points, gmm_sample
from .nn import AdamState, MlpModel, adam_step, mlp_backward, mlp_forward, mlp_init
from .samplers import AnalyticScore, LearnedScore
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

T_MIN = 0.005
TAU_SAMPLING = ("grid", "continuous")


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    lr_final: float | None = None  # cosine decay target; None keeps lr constant
    seed: int = 0
    N: int = 20
    score_source: str = "analytic"
    hidden: tuple = (128, 128, 128)
    t_min: float = T_MIN
    tau_sampling: str = "grid"
    h_rule: str = "inv-sqrt-beta"  # h = 1/sqrt(beta_tau); the only rule implemented

    def __post_init__(self):
        if int(self.iterations) < 0:
            raise ValueError("iterations must be >= 0")
        if int(self.batch_size) < 1 or int(self.N) < 1:
            raise ValueError("batch_size and N must be positive")
        if not self.lr > 0 or (self.lr_final is not None and not self.lr_final > 0):
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.t_min < 1.0:
            raise ValueError("t_min must lie in (0, 1)")
        if self.tau_sampling not in TAU_SAMPLING:
            raise ValueError(f"tau_sampling must be one of {TAU_SAMPLING}")
        if self.score_source not in ("analytic", "learned"):
            raise ValueError(f"unknown score source {self.score_source!r}")
        if self.h_rule != "inv-sqrt-beta":
            raise ValueError("only h_rule='inv-sqrt-beta' is supported")
        self.iterations, self.batch_size, self.N = int(self.iterations), int(self.batch_size), int(self.N)
        self.seed = int(self.seed)
        self.hidden = tuple(int(h) for h in self.hidden)

    @classmethod
    def from_dict(cls, cfg: dict) -> "TrainConfig":
        unknown = set(cfg) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training fields: {sorted(unknown)}")
        return cls(**cfg)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def lr_at(self, it: int) -> float:
        if self.lr_final is None or self.iterations <= 1:
            return self.lr
        frac = it / (self.iterations - 1)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + math.cos(math.pi * frac))


def _rng(cfg: TrainConfig, rng):
    return np.random.default_rng(cfg.seed) if rng is None else rng


def _finite_loss(value, it, what):
    if not math.isfinite(value):
        raise FloatingPointError(f"{what}: non-finite loss at iteration {it}")
    return value


# ----------------------------------------------------------------------------
# denoising score matching


@dataclass
class DsmBatch:
    x: np.ndarray  # (n, d) noised points x_t
    tau: np.ndarray  # (n,) reverse time 1 - t
    z: np.ndarray  # (n, d) noise used to form x
    sigma: np.ndarray  # (n,) sigma_t


def dsm_batch(data: GaussianMixture, schedule: NoiseSchedule, n: int, rng, t_min: float = T_MIN) -> DsmBatch:
    """x_t = e^{-B(t)} x0 + sigma_t z with t ~ U[t_min, 1]."""
    x0 = gmm_sample(data, n, rng).points
    t = rng.uniform(t_min, 1.0, size=n)
    scale, sigma = schedule.alpha_sigma(t)
    z = rng.standard_normal(x0.shape)
    return DsmBatch(x0 * scale[:, None] + sigma[:, None] * z, 1.0 - t, z, sigma)


def dsm_objective(score, batch: DsmBatch) -> float:
    """Empirical E ||sigma_t s(x_t, 1 - t) + z||^2 for any score callable taking per-row tau."""
    s = _score_rows(score, batch.x, batch.tau)
    r = batch.sigma[:, None] * s + batch.z
    return float(np.mean(np.sum(r * r, axis=1)))


def train_score_dsm(data: GaussianMixture, schedule: NoiseSchedule, cfg: TrainConfig,
                    rng: np.random.Generator | None = None, losses: list | None = None) -> MlpModel:
    """Fit the noise-predictor network; read it back through ``LearnedScore``.

    With s = net / sigma_t the weighted loss sigma_t^2 ||s + z / sigma_t||^2
    becomes ||net + z||^2, which is what is minimized here.
    """
    rng = _rng(cfg, rng)
    model = mlp_init(data.dim, cfg.hidden, rng)
    model.meta = {"kind": "score", "schedule": schedule.to_dict(), "t_min": cfg.t_min,
                  "train": cfg.to_dict(), "data": data.to_dict()}
    state = AdamState.zeros_like(model)
    losses = [] if losses is None else losses
    for it in range(cfg.iterations):
        b = dsm_batch(data, schedule, cfg.batch_size, rng, cfg.t_min)
        r = mlp_forward(model, b.x, b.tau) + b.z
        losses.append(_finite_loss(float(np.mean(np.sum(r * r, axis=1))), it, "dsm"))
        adam_step(model, state, mlp_backward(model, b.x, b.tau, 2.0 * r), cfg.lr_at(it))
    if losses:
        log.info("dsm: %d iterations, final loss %.4g", cfg.iterations, losses[-1])
    return model


def score_relative_mse(score, data: GaussianMixture, schedule: NoiseSchedule, n: int, rng,
                       t_range=(0.1, 1.0)) -> float:
    """E||s - s*||^2 / E||s*||^2 with x ~ mu_t and t uniform on ``t_range``."""
    exact = AnalyticScore(data, schedule)
    x0 = gmm_sample(data, n, rng).points
    t = rng.uniform(t_range[0], t_range[1], size=n)
    scale, sigma = schedule.alpha_sigma(t)
    x = x0 * scale[:, None] + sigma[:, None] * rng.standard_normal(x0.shape)
    s_true = _score_rows(exact, x, 1.0 - t)
    s_est = _score_rows(score, x, 1.0 - t)
    return float(np.sum((s_est - s_true) ** 2) / np.sum(s_true**2))


def _score_rows(score, x, tau):
    """Evaluate a score at per-row times. Learned scores take the vector directly;
    others are called once per distinct time."""
    tau = np.asarray(tau, dtype=float)
    if isinstance(score, LearnedScore):
        return score(x, tau)
    out = np.empty_like(x)
    uniq, inv = np.unique(tau, return_inverse=True)
    for k, tk in enumerate(uniq):
        rows = inv == k
        out[rows] = score(x[rows], float(tk))
    return out


# ----------------------------------------------------------------------------
# Wasserstein-gradient estimator


class QuadraticFunctional:
    """Paired J(mu) = E||y - c(x)||^2 for y = x + T(x); ``center`` is a point or a map x -> c."""

    def __init__(self, center):
        self.center = center

    def centers(self, x):
        if callable(self.center):
            return np.asarray(self.center(x), dtype=float)
        return np.broadcast_to(np.asarray(self.center, dtype=float), x.shape)

    def __call__(self, y, x):
        diff = y - self.centers(x)
        return np.sum(diff * diff, axis=1), 2.0 * diff

    def exact_minimizer(self, x, h):
        """Pointwise argmin_t ||x + t - c||^2 + ||t||^2 / 2h."""
        return (2.0 * h / (2.0 * h + 1.0)) * (self.centers(x) - x)


def _as_sampler(sample_source) -> Callable:
    if isinstance(sample_source, GaussianMixture):
        return lambda n, rng: gmm_sample(sample_source, n, rng).points
    if callable(sample_source):
        return lambda n, rng: as_points(sample_source(n, rng))
    pool = as_points(sample_source)
    return lambda n, rng: pool[rng.integers(0, pool.shape[0], size=n)]


def wgrad_estimate(j_eval, sample_source, h: float, cfg: TrainConfig,
                   rng: np.random.Generator | None = None, tau: float = 0.0,
                   losses: list | None = None) -> MlpModel:
    """Minimize J((I + T)#mu) + ||T||^2_mu / 2h over the network T by minibatch Adam.

    ``j_eval(y, x)`` returns per-point values of J at transported points ``y``
    and their gradient in ``y``. ``sample_source`` is a mixture, a callable
    ``(n, rng) -> points`` or a fixed point cloud. The network predicts T / h;
    the returned model has the factor h folded into its output layer so it
    evaluates T directly, and to first order T = -h grad_W2 J.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    rng = _rng(cfg, rng)
    draw = _as_sampler(sample_source)
    probe = draw(1, np.random.default_rng(0))
    model = mlp_init(probe.shape[1], cfg.hidden, rng)
    state = AdamState.zeros_like(model)
    losses = [] if losses is None else losses
    for it in range(cfg.iterations):
        x = draw(cfg.batch_size, rng)
        u = mlp_forward(model, x, tau)
        t_map = h * u
        jval, jgrad = j_eval(x + t_map, x)
        obj = float(np.mean(jval + np.sum(t_map * t_map, axis=1) / (2.0 * h)))
        losses.append(_finite_loss(obj, it, "wgrad"))
        # d/du of J(x + h u) + h ||u||^2 / 2
        adam_step(model, state, mlp_backward(model, x, tau, h * (jgrad + u)), cfg.lr_at(it))
    model.weights[-1] *= h
    model.biases[-1] *= h
    model.meta = {"kind": "wgrad", "h": h, "tau": tau, "train": cfg.to_dict()}
    return model


# ----------------------------------------------------------------------------
# projection model


@dataclass
class ProjectionPairs:
    """Batch of training pairs for the projection map, one row per pair."""

    x_pred: np.ndarray  # (n, d)
    x_mean: np.ndarray  # (n, d)
    tau: np.ndarray  # (n,)
    tau_next: np.ndarray  # (n,)
    x0: np.ndarray  # (n, d) data draw behind each pair

    def __post_init__(self):
        for name in ("x_pred", "x_mean", "x0"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite {name}")
        if np.any(self.tau_next <= 0) or np.any(self.tau_next > 1.0 + 1e-12):
            raise ValueError("tau_next must lie in (0, 1]")

    def __len__(self):
        return self.x_pred.shape[0]


def make_projection_pairs(data: GaussianMixture, schedule: NoiseSchedule, score, N: int, batch: int,
                          rng: np.random.Generator, tau_sampling: str = "grid",
                          tau_index: int | None = None) -> ProjectionPairs:
    """Draw (x_pred, x_mean) pairs on the N-step reverse grid.

    x0 ~ data, tau = i/N with i uniform (or tau ~ U[0, 1 - 1/N] when continuous),
    x_tau from the forward conditional at t = 1 - tau, x_pred one predict step
    later and x_mean = e^{-B(1 - tau - dtau)} x0. ``tau_index`` pins i.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    dtau = 1.0 / N
    x0 = gmm_sample(data, batch, rng).points
    if tau_index is not None:
        if not 0 <= tau_index < N:
            raise ValueError(f"tau_index must lie in [0, {N})")
        tau = np.full(batch, tau_index / N)
    elif tau_sampling == "grid":
        tau = rng.integers(0, N, size=batch) / N
    elif tau_sampling == "continuous":
        tau = rng.uniform(0.0, 1.0 - dtau, size=batch)
    else:
        raise ValueError(f"tau_sampling must be one of {TAU_SAMPLING}")
    tau_next = np.minimum(tau + dtau, 1.0)
    scale, sigma = schedule.alpha_sigma(1.0 - tau)
    x_tau = x0 * scale[:, None] + sigma[:, None] * rng.standard_normal(x0.shape)
    s = _score_rows(score, x_tau, tau)
    beta = schedule.reverse_beta(tau)[:, None]
    x_pred = x_tau + (2.0 * beta * s + beta * x_tau) * dtau
    x_mean = x0 * np.exp(-schedule.beta_integral(1.0 - tau_next))[:, None]
    return ProjectionPairs(x_pred, x_mean, tau, tau_next, x0)


def projection_objective(model: MlpModel, pairs: ProjectionPairs, schedule: NoiseSchedule) -> float:
    """E ||x_pred + T(x_pred, tau_next) - x_mean||^2 + (sqrt(beta_tau) / 2) ||T||^2."""
    t_map = mlp_forward(model, pairs.x_pred, pairs.tau_next)
    r = pairs.x_pred + t_map - pairs.x_mean
    sb = np.sqrt(schedule.reverse_beta(pairs.tau))
    return float(np.mean(np.sum(r * r, axis=1) + 0.5 * sb * np.sum(t_map * t_map, axis=1)))


def projection_target(pairs: ProjectionPairs, schedule: NoiseSchedule) -> np.ndarray:
    """Per-pair regression target whose conditional mean given x_pred is the optimal T."""
    sb = np.sqrt(schedule.reverse_beta(pairs.tau))[:, None]
    return 2.0 / (2.0 + sb) * (pairs.x_mean - pairs.x_pred)


def _check_score(score, data, schedule, cfg):
    if score.dim != data.dim:
        raise ValueError("score dimension does not match the data")
    if cfg.score_source == "analytic" and not isinstance(score, AnalyticScore):
        raise ValueError("score_source='analytic' needs an AnalyticScore")
    if cfg.score_source == "learned" and not isinstance(score, LearnedScore):
        raise ValueError("score_source='learned' needs a LearnedScore")
    if getattr(score, "schedule", schedule) != schedule:
        raise ValueError("score was built for a different schedule")


def train_projection(data: GaussianMixture, schedule: NoiseSchedule, score, cfg: TrainConfig,
                     rng: np.random.Generator | None = None, losses: list | None = None) -> MlpModel:
    """Fit T(x_pred, tau + dtau) on fresh pairs each iteration.

    The objective is the Wasserstein-gradient estimator with J the squared
    distance to x_mean and h = 1/sqrt(beta_tau), so the trained map satisfies
    sqrt(beta_tau) T ~ -grad_W2 J at the predicted measure.
    """
    _check_score(score, data, schedule, cfg)
    rng = _rng(cfg, rng)
    model = mlp_init(data.dim, cfg.hidden, rng)
    state = AdamState.zeros_like(model)
    losses = [] if losses is None else losses
    for it in range(cfg.iterations):
        pairs = make_projection_pairs(data, schedule, score, cfg.N, cfg.batch_size, rng, cfg.tau_sampling)
        t_map = mlp_forward(model, pairs.x_pred, pairs.tau_next)
        r = pairs.x_pred + t_map - pairs.x_mean
        sb = np.sqrt(schedule.reverse_beta(pairs.tau))[:, None]
        obj = float(np.mean(np.sum(r * r + 0.5 * sb * t_map * t_map, axis=1)))
        losses.append(_finite_loss(obj, it, "projection"))
        upstream = 2.0 * r + sb * t_map
        adam_step(model, state, mlp_backward(model, pairs.x_pred, pairs.tau_next, upstream), cfg.lr_at(it))
    model.meta = {"kind": "projection", "schedule": schedule.to_dict(), "score_source": cfg.score_source,
                  "N": cfg.N, "train": cfg.to_dict()}
    return model
