"""Forward diffusion: particle simulation and 1D density evolution.

Two grid solvers evolve the same density:

* ``fokker_planck_evolve``: the VP Fokker-Planck equation
  d mu/dt = -div(mu f) + beta lap(mu), with f = -beta x;
* ``wgf_evolve``: the accelerated Wasserstein gradient flow of KL(.||N(0,1)),
  d mu/dt = div(mu beta grad log(mu/pi)).

Both use conservative fluxes on cell interfaces with zero flux at the box
edges. They differ only in how the diffusive part of the flux is formed: FP
differences mu itself, WGF differences log mu and multiplies by the interface
mean of mu. Agreement between the two is a numerical check that the two PDEs
have the same solution.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .measures import GaussianMixture, SampleBatch, gmm_log_density
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-300
MAX_SUBSTEPS = 64
BLOWUP_CLAMP = 1e-3


class StabilityError(ValueError):
    """Requested time step cannot be taken stably by the explicit scheme."""


class BlowupError(RuntimeError):
    pass


@dataclass(eq=False)
class GridDensity1D:
    x_min: float
    x_max: float
    values: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or self.values.size < 16:
            raise ValueError("grid needs at least 16 cells")
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("grid values must be finite and nonnegative")
        if abs(self.mass() - 1.0) > 1e-6:
            raise ValueError(f"grid mass {self.mass()!r} is not 1 within 1e-6")

    @property
    def m(self) -> int:
        return self.values.size

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.m

    def centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.m) + 0.5) * self.dx

    def mass(self) -> float:
        return float(self.values.sum() * self.dx)


def grid_from_mixture(gm: GaussianMixture, x_min=-8.0, x_max=8.0, m=512) -> GridDensity1D:
    """Point-evaluate a 1D mixture density at cell centres, normalized to unit mass."""
    if gm.dim != 1:
        raise ValueError("grid densities are 1D only")
    dx = (x_max - x_min) / m
    xc = x_min + (np.arange(m) + 0.5) * dx
    vals = np.exp(gmm_log_density(gm, xc[:, None]))
    return GridDensity1D(x_min, x_max, vals / (vals.sum() * dx))


def l1_distance(a: GridDensity1D, b: GridDensity1D) -> float:
    if a.m != b.m or a.x_min != b.x_min or a.x_max != b.x_max:
        raise ValueError("grids differ")
    return float(np.abs(a.values - b.values).sum() * a.dx)


def stable_dt(grid: GridDensity1D, schedule: NoiseSchedule, t0: float, t1: float) -> float:
    """Largest explicit sub-step dx^2 / (2 max g^2) over [t0, t1]."""
    g2 = 2.0 * max(schedule.beta_at(t0), schedule.beta_at(t1))
    return math.inf if g2 == 0 else grid.dx**2 / (2.0 * g2)


def _fp_flux(mu, xf, beta, dx):
    # interior interfaces only; f = -beta x
    return -beta * (xf * 0.5 * (mu[:-1] + mu[1:]) + (mu[1:] - mu[:-1]) / dx)


def _wgf_flux(mu, xf, beta, dx):
    logmu = np.log(np.maximum(mu, LOG_FLOOR))
    grad_log_ratio = (logmu[1:] - logmu[:-1]) / dx + xf
    return -beta * 0.5 * (mu[:-1] + mu[1:]) * grad_log_ratio


def _evolve(flux, grid, schedule, t0, t1, dt, max_substeps, name):
    if not t1 > t0:
        raise ValueError("need t0 < t1")
    if not dt > 0:
        raise ValueError("dt must be positive")
    dx = grid.dx
    xf = grid.x_min + np.arange(1, grid.m) * dx
    mu = grid.values.copy()
    n_outer = max(1, math.ceil((t1 - t0) / dt - 1e-9))
    h = (t1 - t0) / n_outer
    worst = stable_dt(grid, schedule, t0, t1)
    if math.ceil(h / worst - 1e-12) > max_substeps:
        raise StabilityError(
            f"dt={dt:g} exceeds the stable step {worst:.3g} by more than {max_substeps} sub-steps"
        )
    drift = 0.0
    clamp_total = 0.0
    substeps_total = 0
    for j in range(n_outer):
        ta = t0 + j * h
        tb = min(t0 + (j + 1) * h, t1)
        k = max(1, math.ceil(h / stable_dt(grid, schedule, ta, tb) - 1e-12))
        hs = h / k
        for s in range(k):
            beta = float(schedule.beta_at(ta + s * hs))
            f = flux(mu, xf, beta, dx)
            div = np.empty_like(mu)
            div[0] = f[0]
            div[1:-1] = f[1:] - f[:-1]
            div[-1] = -f[-1]
            mu -= (hs / dx) * div
            neg = mu < 0
            if neg.any():
                clamp_total += float(-mu[neg].sum() * dx)
                mu[neg] = 0.0
                if clamp_total > BLOWUP_CLAMP:
                    raise BlowupError(f"{name}: clamped mass {clamp_total:.3g} exceeds {BLOWUP_CLAMP}")
            mass = mu.sum() * dx
            drift = max(drift, abs(mass - 1.0))
            mu /= mass
        substeps_total += k
    edge_mass = float((mu[0] + mu[-1]) * dx)
    log.debug("%s t=%g->%g: substeps=%d mass_drift=%.3g clamp=%.3g edge=%.3g",
              name, t0, t1, substeps_total, drift, clamp_total, edge_mass)
    diag = {"mass_drift": drift, "clamp_total": clamp_total, "substeps": substeps_total,
            "edge_mass": edge_mass}
    return GridDensity1D(grid.x_min, grid.x_max, mu, diag)


def fokker_planck_evolve(grid: GridDensity1D, schedule: NoiseSchedule, t0: float, t1: float,
                         dt: float, max_substeps: int = MAX_SUBSTEPS) -> GridDensity1D:
    """Explicit conservative finite differences for the VP Fokker-Planck equation.

    Each step of size ``dt`` is split into the fewest equal sub-steps that meet
    dx^2 / (2 max g^2); if that takes more than ``max_substeps`` a
    StabilityError is raised. Pass ``max_substeps=1`` for the strict guard.
    """
    return _evolve(_fp_flux, grid, schedule, t0, t1, dt, max_substeps, "fokker-planck")


def wgf_evolve(grid: GridDensity1D, schedule: NoiseSchedule, t0: float, t1: float,
               dt: float, max_substeps: int = MAX_SUBSTEPS) -> GridDensity1D:
    """Accelerated Wasserstein gradient flow of KL(.||N(0,1)) on the grid.

    The velocity -beta (grad log mu + x) uses the centred difference of log mu
    across each interface (mu floored at 1e-300). Stepping as in
    ``fokker_planck_evolve``.
    """
    return _evolve(_wgf_flux, grid, schedule, t0, t1, dt, max_substeps, "wgf")


def forward_em(batch: SampleBatch, schedule: NoiseSchedule, N: int,
               rng: np.random.Generator) -> SampleBatch:
    """Euler-Maruyama for dx = -beta x dt + sqrt(2 beta) dw over t in [0, 1]."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if batch.time != 0.0:
        raise ValueError("forward_em starts from a batch at time 0")
    x = batch.points.copy()
    dt = 1.0 / N
    for i in range(N):
        beta = schedule.beta_at(i * dt)
        x = x - beta * x * dt + np.sqrt(2.0 * beta * dt) * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state at step {i + 1}; dt too large?")
    return SampleBatch(x, 1.0)


def forward_exact(batch0: SampleBatch, t: float, schedule: NoiseSchedule,
                  rng: np.random.Generator) -> SampleBatch:
    """Draw x_t | x_0 = x_0 e^{-B(t)} + sqrt(1 - e^{-2B(t)}) z."""
    scale, sigma = schedule.alpha_sigma(t)
    z = rng.standard_normal(batch0.points.shape)
    return SampleBatch(batch0.points * scale + sigma * z, float(t))
