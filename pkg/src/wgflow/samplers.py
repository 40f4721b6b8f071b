"""Reverse-time generation as predict / (project) / diffuse steps.

Every sampler runs the same loop over the reverse-time grid ``tau_i = i/N``:

    x_pred = x + ((1 + alpha) beta s(x, tau) + beta x) dtau    # pi = N(0, I)
    x_proj = x_pred + sqrt(beta) * delta_mu * dtau * T(x_pred, tau + dtau)
    x      = x_proj + sqrt(2 alpha beta dtau) z

alpha = 1 is the reverse SDE, alpha = 0 the probability-flow ODE; the
projection term is only present for predict-project.

Chains are processed in fixed blocks of ``BLOCK`` rows. Block ``b`` draws all
its randomness from a Philox stream keyed by ``(seed, b)``, so output does not
depend on how many workers run the blocks.

Brownian increments are drawn on a fixed grid of ``BROWNIAN_BASE`` steps and
summed onto the sampler grid whenever N divides it. Each run has the usual
Euler-Maruyama law, and runs with the same seed at different N follow the same
Brownian path, which keeps step-size comparisons from drowning in sampling noise.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .measures import GaussianMixture, SampleBatch, gmm_diffuse, gmm_score
from .nn import CheckpointError, MlpModel, mlp_forward
from .schedule import NoiseSchedule

KINDS = ("reverse-sde", "prob-ode", "alpha-sde", "langevin", "predict-project")
SCORE_SOURCES = ("analytic", "learned")
BLOCK = 1024
BROWNIAN_BASE = 1000
DIVERGENCE_LIMIT = 1e6
DELTA_MU_TABLE = {20: 1.0, 40: 0.4, 100: 0.1}


class DivergenceError(RuntimeError):
    pass


def default_delta_mu(n_steps: int) -> float:
    """Projection strength keyed by step count: 20 -> 1, 40 -> 0.4, 100 -> 0.1, >=1000 -> 0."""
    if n_steps >= 1000:
        return 0.0
    smaller = [k for k in DELTA_MU_TABLE if k <= n_steps]
    return DELTA_MU_TABLE[max(smaller)] if smaller else DELTA_MU_TABLE[min(DELTA_MU_TABLE)]


@dataclass
class SamplerConfig:
    kind: str = "reverse-sde"
    N: int = 100
    n: int = 1000
    alpha: float = 1.0
    delta_mu: float | None = None
    score_source: str = "analytic"
    denoise_last: bool = False
    seed: int = 0
    langevin_beta: float = 1.0
    checkpoints: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.score_source not in SCORE_SOURCES:
            raise ValueError(f"unknown score source {self.score_source!r}")
        if int(self.N) < 1 or int(self.n) < 1:
            raise ValueError("N and n must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.delta_mu is None:
            self.delta_mu = default_delta_mu(int(self.N))
        if self.delta_mu < 0:
            raise ValueError("delta_mu must be >= 0")
        self.N, self.n, self.seed = int(self.N), int(self.n), int(self.seed)
        self.checkpoints = tuple(float(c) for c in self.checkpoints)

    @classmethod
    def from_dict(cls, cfg: dict) -> "SamplerConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(cfg) - known
        if unknown:
            raise ValueError(f"unknown sampler fields: {sorted(unknown)}")
        return cls(**cfg)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["checkpoints"] = list(self.checkpoints)
        return d


class ScoreFunction:
    """Callable (x: (n, d), tau) -> approximation of grad log mu_tau(x)."""

    dim: int

    def __call__(self, x: np.ndarray, tau: float) -> np.ndarray:
        raise NotImplementedError


class AnalyticScore(ScoreFunction):
    """Exact score of the data mixture diffused to forward time t = 1 - tau."""

    def __init__(self, data: GaussianMixture, schedule: NoiseSchedule):
        self.data = data
        self.schedule = schedule
        self.dim = data.dim

    def marginal(self, tau: float) -> GaussianMixture:
        return gmm_diffuse(self.data, 1.0 - tau, self.schedule)

    def __call__(self, x, tau):
        return gmm_score(self.marginal(tau), x)


class LearnedScore(ScoreFunction):
    """Trained network read as a noise predictor: s(x, tau) = net(x, tau) / sigma(1 - tau)."""

    def __init__(self, model: MlpModel, schedule: NoiseSchedule, t_min: float = 0.005):
        self.model = model
        self.schedule = schedule
        self.dim = model.dim
        self.sigma_floor = float(schedule.alpha_sigma(t_min)[1])

    def sigma(self, tau):
        return np.maximum(self.schedule.alpha_sigma(1.0 - np.asarray(tau))[1], self.sigma_floor)

    def __call__(self, x, tau):
        sig = self.sigma(tau)
        if np.ndim(sig):
            sig = sig[:, None]
        return mlp_forward(self.model, x, tau) / sig


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite {what}")


def predict_step(x, tau, dtau, score, schedule: NoiseSchedule, alpha: float = 1.0):
    """Explicit drift step toward the data; alpha scales the score coefficient as (1 + alpha) beta."""
    beta = schedule.reverse_beta(tau)
    s = score(x, tau)
    _check_finite(s, "score")
    return x + ((1.0 + alpha) * beta * s + beta * x) * dtau


def diffuse_step(x, tau, dtau, schedule: NoiseSchedule, rng, alpha: float = 1.0, z=None):
    """Brownian step of variance 2 alpha beta dtau; alpha = 0 consumes no randomness.

    ``z`` supplies the standard normal draw directly (rng is then unused).
    """
    if alpha == 0:
        return x
    beta = schedule.reverse_beta(tau)
    if z is None:
        z = rng.standard_normal(np.shape(x))
    return x + np.sqrt(2.0 * alpha * beta * dtau) * z


def brownian_refinement(n_steps: int) -> int:
    """Fine increments summed per sampler step (1 when N does not divide the base grid)."""
    if n_steps <= BROWNIAN_BASE and BROWNIAN_BASE % n_steps == 0:
        return BROWNIAN_BASE // n_steps
    return 1


def _normal_increment(rng, k, shape):
    if k == 1:
        return rng.standard_normal(shape)
    return rng.standard_normal((k, *shape)).sum(axis=0) / np.sqrt(k)


def project_step(x_pred, tau, dtau, proj: MlpModel, schedule: NoiseSchedule, delta_mu: float):
    beta = schedule.reverse_beta(tau)
    t_map = mlp_forward(proj, x_pred, tau + dtau)
    return x_pred + t_map * (np.sqrt(beta) * delta_mu * dtau)


def block_rng(seed: int, block: int) -> np.random.Generator:
    key = np.array([np.uint64(seed % 2**64), np.uint64(block)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def worker_count() -> int:
    raw = os.environ.get("WGFLOW_THREADS", "0")
    try:
        k = int(raw)
    except ValueError:
        k = 0
    return k if k > 0 else (os.cpu_count() or 1)


@dataclass
class SampleResult:
    batch: SampleBatch
    trajectory: dict = field(default_factory=dict)  # tau -> (n, d) array


def _run_block(block, size, d, cfg, score, schedule, alpha, proj, delta_mu, checkpoint_steps):
    rng = block_rng(cfg.seed, block)
    x = rng.standard_normal((size, d))
    n_steps = cfg.N
    dtau = 1.0 / n_steps
    k = brownian_refinement(n_steps)
    snaps = {}
    if 0 in checkpoint_steps:
        snaps[checkpoint_steps[0]] = x.copy()
    for i in range(n_steps):
        tau = i / n_steps
        x = predict_step(x, tau, dtau, score, schedule, alpha)
        if proj is not None:
            x = project_step(x, tau, dtau, proj, schedule, delta_mu)
        if alpha != 0 and not (cfg.denoise_last and i == n_steps - 1):
            x = diffuse_step(x, tau, dtau, schedule, rng, alpha, z=_normal_increment(rng, k, x.shape))
        peak = np.max(np.abs(x))
        if not peak <= DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"{cfg.kind} diverged at step {i + 1}/{n_steps} (tau={tau:.4f}, |x|max={peak:.3g})"
            )
        if i + 1 in checkpoint_steps:
            snaps[checkpoint_steps[i + 1]] = x.copy()
    return x, snaps


def _run_chains(cfg: SamplerConfig, score, schedule, alpha, proj=None, delta_mu=0.0) -> SampleResult:
    d = score.dim
    checkpoint_steps = {}
    for c in cfg.checkpoints:
        step = int(round(c * cfg.N))
        if not 0 <= step <= cfg.N or abs(step - c * cfg.N) > 1e-9:
            raise ValueError(f"checkpoint tau={c} is not on the {cfg.N}-step grid")
        checkpoint_steps[step] = c
    sizes = [min(BLOCK, cfg.n - s) for s in range(0, cfg.n, BLOCK)]
    jobs = [
        (b, size, d, cfg, score, schedule, alpha, proj, delta_mu, checkpoint_steps)
        for b, size in enumerate(sizes)
    ]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda job: _run_block(*job), jobs))
    else:
        results = [_run_block(*job) for job in jobs]
    x = np.concatenate([r[0] for r in results], axis=0)
    traj = {c: np.concatenate([r[1][c] for r in results], axis=0) for c in checkpoint_steps.values()}
    return SampleResult(SampleBatch(x, 0.0), traj)


def _require(cfg, *kinds):
    if cfg.kind not in kinds:
        raise ValueError(f"sampler kind {cfg.kind!r} not valid here; expected one of {kinds}")


def reverse_sde_sample(cfg: SamplerConfig, score, schedule: NoiseSchedule) -> SampleResult:
    _require(cfg, "reverse-sde")
    return _run_chains(cfg, score, schedule, alpha=1.0)


def prob_ode_sample(cfg: SamplerConfig, score, schedule: NoiseSchedule) -> SampleResult:
    _require(cfg, "prob-ode")
    return _run_chains(cfg, score, schedule, alpha=0.0)


def alpha_reverse_sample(cfg: SamplerConfig, score, schedule: NoiseSchedule) -> SampleResult:
    _require(cfg, "alpha-sde")
    return _run_chains(cfg, score, schedule, alpha=float(cfg.alpha))


def check_projection(proj: MlpModel, schedule: NoiseSchedule, cfg: SamplerConfig) -> None:
    meta = proj.meta
    if meta.get("kind", "projection") != "projection":
        raise CheckpointError("model is not a projection checkpoint")
    if "schedule" in meta and NoiseSchedule.from_dict(meta["schedule"]) != schedule:
        raise CheckpointError("projection was trained for a different schedule")
    if "score_source" in meta and meta["score_source"] != cfg.score_source:
        raise CheckpointError(
            f"projection was trained with {meta['score_source']} score, run uses {cfg.score_source}"
        )
    if "N" in meta and int(meta["N"]) != cfg.N:
        raise CheckpointError(f"projection was trained for N={meta['N']}, run uses N={cfg.N}")


def predict_project_sample(cfg: SamplerConfig, score, proj: MlpModel, schedule: NoiseSchedule) -> SampleResult:
    _require(cfg, "predict-project")
    if proj.dim != score.dim:
        raise CheckpointError("projection dimension does not match the score")
    check_projection(proj, schedule, cfg)
    return _run_chains(cfg, score, schedule, alpha=1.0, proj=proj, delta_mu=float(cfg.delta_mu))


def langevin_sample(target: GaussianMixture, steps: int, beta: float, dtau: float,
                    rng: np.random.Generator, n: int) -> SampleBatch:
    """Unadjusted Langevin chain x <- x + beta grad log rho dtau + sqrt(2 beta dtau) z from N(0, I)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = rng.standard_normal((n, target.dim))
    if beta == 0:
        return SampleBatch(x, 0.0)
    noise = np.sqrt(2.0 * beta * dtau)
    for i in range(steps):
        x = x + beta * gmm_score(target, x) * dtau + noise * rng.standard_normal(x.shape)
        if not np.max(np.abs(x)) <= DIVERGENCE_LIMIT:
            raise DivergenceError(f"langevin diverged at step {i + 1}/{steps}")
    return SampleBatch(x, 0.0)


def run_sampler(cfg: SamplerConfig, score, schedule: NoiseSchedule, proj: MlpModel | None = None,
                target: GaussianMixture | None = None) -> SampleResult:
    """Dispatch on ``cfg.kind``."""
    if cfg.kind == "reverse-sde":
        return reverse_sde_sample(cfg, score, schedule)
    if cfg.kind == "prob-ode":
        return prob_ode_sample(cfg, score, schedule)
    if cfg.kind == "alpha-sde":
        return alpha_reverse_sample(cfg, score, schedule)
    if cfg.kind == "predict-project":
        if proj is None:
            raise CheckpointError("predict-project requires a projection checkpoint")
        return predict_project_sample(cfg, score, proj, schedule)
    if target is None:
        raise ValueError("langevin sampling needs a target mixture")
    rng = block_rng(cfg.seed, 0)
    return SampleResult(langevin_sample(target, cfg.N, cfg.langevin_beta, 1.0 / cfg.N, rng, cfg.n))
