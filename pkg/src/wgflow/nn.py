"""Dense SiLU MLP with sinusoidal time features, manual backprop and Adam.

Used both for the score model s(x, tau) and the projection map T(x, tau).
Weights are stored as (fan_in, fan_out) matrices so a batch forward pass is
``h @ W + b``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

FREQUENCIES = (1.0, 2.0, 4.0, 8.0)
EMBED_DIM = 1 + 2 * len(FREQUENCIES)
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint is missing, malformed, or incompatible with the run."""


@dataclass
class MlpModel:
    dim: int
    hidden: tuple
    weights: list
    biases: list
    meta: dict = field(default_factory=dict)

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.dim,
            tuple(self.hidden),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            dict(self.meta),
        )


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, model: MlpModel) -> "AdamState":
        return cls([np.zeros_like(p) for p in model.params()], [np.zeros_like(p) for p in model.params()])


def layer_sizes(d: int, hidden) -> list:
    return [d + EMBED_DIM, *hidden, d]


def expected_param_count(d: int, hidden) -> int:
    sizes = layer_sizes(d, hidden)
    return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))


def mlp_init(d: int, hidden=(128, 128, 128), rng: np.random.Generator | None = None) -> MlpModel:
    """He-scaled hidden layers and a zero output layer, so the fresh model is the zero map."""
    if d < 1 or any(h < 1 for h in hidden):
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    sizes = layer_sizes(d, hidden)
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if i == len(sizes) - 2:
            weights.append(np.zeros((fan_in, fan_out)))
        else:
            weights.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return MlpModel(d, tuple(int(h) for h in hidden), weights, biases)


def time_embedding(tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=float).reshape(-1)
    feats = [tau]
    for f in FREQUENCIES:
        ang = 2.0 * np.pi * f * tau
        feats.extend((np.sin(ang), np.cos(ang)))
    return np.stack(feats, axis=1)


def _inputs(m: MlpModel, x, tau):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != m.dim:
        raise ValueError(f"expected inputs of dimension {m.dim}, got shape {x.shape}")
    tau = np.asarray(tau, dtype=float)
    if tau.ndim == 0:
        tau = np.full(x2.shape[0], float(tau))
    if tau.shape != (x2.shape[0],):
        raise ValueError("tau must be a scalar or one value per row")
    return np.concatenate([x2, time_embedding(tau)], axis=1), single


def _silu(a):
    return a * expit(a)


def _forward_cached(m: MlpModel, h: np.ndarray):
    pre, acts = [], [h]
    last = len(m.weights) - 1
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        a = h @ w + b
        if i == last:
            return a, pre, acts
        pre.append(a)
        h = _silu(a)
        acts.append(h)


def mlp_forward(m: MlpModel, x, tau) -> np.ndarray:
    """Evaluate the network at rows of ``x`` (or a single d-vector) and time ``tau``."""
    h, single = _inputs(m, x, tau)
    out, _, _ = _forward_cached(m, h)
    return out[0] if single else out


def mlp_backward(m: MlpModel, x, tau, upstream) -> list:
    """Batch-averaged parameter gradients of sum_i <upstream_i, f(x_i, tau_i)>.

    Returned in ``m.params()`` order: [dW0, db0, dW1, db1, ...].
    """
    h, _ = _inputs(m, x, tau)
    g = np.asarray(upstream, dtype=float)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != (h.shape[0], m.dim):
        raise ValueError(f"upstream shape {g.shape} does not match output ({h.shape[0]}, {m.dim})")
    n = h.shape[0]
    _, pre, acts = _forward_cached(m, h)
    grads = [None] * (2 * len(m.weights))
    for i in range(len(m.weights) - 1, -1, -1):
        grads[2 * i] = acts[i].T @ g / n
        grads[2 * i + 1] = g.sum(axis=0) / n
        if i == 0:
            break
        a = pre[i - 1]
        s = expit(a)
        g = (g @ m.weights[i].T) * (s * (1.0 + a * (1.0 - s)))
    return grads


def adam_step(m: MlpModel, state: AdamState, grads: list, lr: float):
    """Bias-corrected Adam update, applied in place; returns (model, state)."""
    params = m.params()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match model parameters")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise FloatingPointError("non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, mom, vel in zip(params, grads, state.m, state.v):
        mom *= b1
        mom += (1.0 - b1) * g
        vel *= b2
        vel += (1.0 - b2) * g * g
        p -= lr * (mom / c1) / (np.sqrt(vel / c2) + state.eps)
    return m, state


def lipschitz_bound(m: MlpModel) -> float:
    """Upper bound on the input-Lipschitz constant (SiLU has slope at most ~1.1)."""
    bound = 1.0
    for i, w in enumerate(m.weights):
        bound *= np.linalg.norm(w, 2)
        if i < len(m.weights) - 1:
            bound *= 1.1
    return float(bound)


def save_checkpoint(m: MlpModel, path, kind: str, meta: dict | None = None) -> None:
    """Write ``m`` as JSON; ``meta`` (default ``m.meta``) is stored beside the weights."""
    if kind not in ("score", "projection"):
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    reserved = ("format_version", "kind", "dim", "hidden", "weights")
    meta = {k: v for k, v in (m.meta if meta is None else meta).items() if k not in reserved}
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "dim": m.dim,
        "hidden": list(m.hidden),
        **meta,
        "weights": [
            {"shape": list(w.shape), "W": w.ravel().tolist(), "b": b.tolist()}
            for w, b in zip(m.weights, m.biases)
        ],
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_checkpoint(path, kind: str | None = None) -> MlpModel:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
        if doc.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {doc.get('format_version')!r}")
        if kind is not None and doc["kind"] != kind:
            raise CheckpointError(f"expected a {kind} checkpoint, got {doc['kind']!r}")
        weights, biases = [], []
        for layer in doc["weights"]:
            weights.append(np.array(layer["W"], dtype=float).reshape(layer["shape"]))
            biases.append(np.array(layer["b"], dtype=float))
        meta = {k: v for k, v in doc.items() if k not in ("weights", "dim", "hidden")}
        model = MlpModel(int(doc["dim"]), tuple(doc["hidden"]), weights, biases, meta)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint {p}: {exc}") from exc
    sizes = layer_sizes(model.dim, model.hidden)
    if [w.shape for w in weights] != list(zip(sizes[:-1], sizes[1:])):
        raise CheckpointError(f"layer shapes in {p} do not match dim/hidden")
    return model


def gradient_check(m: MlpModel, x, tau, upstream, eps: float = 1e-6, probes: int | None = None,
                   rng: np.random.Generator | None = None) -> float:
    """Max relative error of ``mlp_backward`` against central differences.

    The scalar checked is mean_i <upstream_i, f(x_i, tau_i)>. ``probes`` limits
    the comparison to that many randomly chosen parameter entries.
    """
    grads = mlp_backward(m, x, tau, upstream)
    u = np.asarray(upstream, dtype=float).reshape(-1, m.dim)
    n = u.shape[0]

    def objective():
        return float(np.sum(u * mlp_forward(m, x, tau).reshape(-1, m.dim)) / n)

    index = [(k, j) for k, p in enumerate(m.params()) for j in range(p.size)]
    if probes is not None and probes < len(index):
        rng = np.random.default_rng(0) if rng is None else rng
        index = [index[i] for i in rng.choice(len(index), size=probes, replace=False)]
    worst = 0.0
    params = m.params()
    for k, j in index:
        flat = params[k].reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        up = objective()
        flat[j] = orig - eps
        down = objective()
        flat[j] = orig
        numeric = (up - down) / (2.0 * eps)
        analytic = grads[k].reshape(-1)[j]
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6))
    return worst
