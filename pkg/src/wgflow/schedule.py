"""Variance-preserving noise schedules on the unit horizon.

The forward process is ``dx = -beta(t) x dt + sqrt(2 beta(t)) dw``, so the
diffusion coefficient is ``g(t) = sqrt(2 beta(t))``. Reverse time is
``tau = 1 - t``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("linear", "constant")


def _check_unit(t, name="t"):
    arr = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {t!r}")
    return arr


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "linear"
    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not (np.isfinite(self.beta_min) and np.isfinite(self.beta_max)):
            raise ValueError("schedule bounds must be finite")
        # a zero constant schedule is allowed as the degenerate no-noise case
        if self.kind == "linear" and self.beta_min <= 0.0:
            raise ValueError("beta_min must be positive")
        if self.beta_min < 0.0:
            raise ValueError("beta_min must be nonnegative")
        if self.beta_max < self.beta_min:
            raise ValueError("beta_max must be >= beta_min")

    @classmethod
    def constant(cls, beta: float) -> "NoiseSchedule":
        return cls("constant", beta, beta)

    @classmethod
    def from_dict(cls, cfg: dict | None) -> "NoiseSchedule":
        cfg = dict(cfg or {})
        kind = cfg.pop("kind", "linear")
        beta_min = float(cfg.pop("beta_min", 0.1))
        beta_max = float(cfg.pop("beta_max", beta_min if kind == "constant" else 20.0))
        if cfg:
            raise ValueError(f"unknown schedule fields: {sorted(cfg)}")
        return cls(kind, beta_min, beta_max)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta_min": self.beta_min, "beta_max": self.beta_max}

    def beta_at(self, t):
        """beta(t); scalar in, scalar out, arrays broadcast."""
        t = _check_unit(t)
        if self.kind == "constant":
            out = np.full_like(t, self.beta_min)
        else:
            out = self.beta_min + t * (self.beta_max - self.beta_min)
        return out[()] if out.ndim == 0 else out

    def beta_integral(self, t):
        """Exact B(t) = int_0^t beta(s) ds."""
        t = _check_unit(t)
        if self.kind == "constant":
            out = self.beta_min * t
        else:
            out = self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
        return out[()] if out.ndim == 0 else out

    def g_at(self, t):
        return np.sqrt(2.0 * self.beta_at(t))

    def reverse_beta(self, tau):
        tau = _check_unit(tau, "tau")
        return self.beta_at(1.0 - tau)

    def max_beta(self) -> float:
        return float(max(self.beta_min, self.beta_max if self.kind == "linear" else self.beta_min))

    def alpha_sigma(self, t):
        """Mean scale exp(-B(t)) and noise std sqrt(1 - exp(-2B(t)))."""
        b = self.beta_integral(t)
        return np.exp(-b), np.sqrt(-np.expm1(-2.0 * b))


DEFAULT_SCHEDULE = NoiseSchedule()
