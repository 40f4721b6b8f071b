"""Command-line entry point: ``wgflow <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 missing or incompatible
checkpoint, 4 divergence abort, 5 check below threshold.

Every command writes its outputs plus a JSON manifest holding the config
echo, seed, timestamps and a 64-bit FNV-1a digest of each output file.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import (BlowupError, StabilityError, fokker_planck_evolve, grid_from_mixture,
                       l1_distance, wgf_evolve)
from .measures import gmm_diffuse, mixture_from_config, standard_normal
from .metrics import DEFAULT_PROJECTIONS, w2_to_mixture
from .nn import CheckpointError, gradient_check, load_checkpoint, mlp_forward, mlp_init, save_checkpoint
from .samplers import (AnalyticScore, DivergenceError, LearnedScore, SamplerConfig, default_delta_mu,
                       run_sampler)
from .schedule import NoiseSchedule
from .training import (QuadraticFunctional, TrainConfig, train_projection, train_score_dsm,
                       wgrad_estimate)

log = logging.getLogger("wgflow")

EXIT_OK, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_DIVERGED, EXIT_THRESHOLD = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


def fnv1a64(data: bytes) -> str:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(path, command, config, seed, started, outputs, notes=None) -> None:
    doc = {
        "tool": "wgflow",
        "version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": {str(p): fnv1a64(Path(p).read_bytes()) for p in outputs},
        "notes": notes or {},
    }
    write_json(path, doc)


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def _manifest_path(args, out) -> Path:
    return Path(args.manifest) if args.manifest else Path(str(out) + ".manifest.json")


def _schedule(cfg) -> NoiseSchedule:
    return NoiseSchedule.from_dict(cfg.get("schedule"))


def _score(source, schedule, data, score_path):
    if source == "analytic":
        return AnalyticScore(data, schedule)
    if score_path is None:
        raise CheckpointError("score_source 'learned' needs --score CHECKPOINT")
    model = load_checkpoint(score_path, kind="score")
    if "schedule" in model.meta and NoiseSchedule.from_dict(model.meta["schedule"]) != schedule:
        raise CheckpointError("score checkpoint was trained for a different schedule")
    if model.dim != data.dim:
        raise CheckpointError("score checkpoint dimension does not match the data")
    return LearnedScore(model, schedule, model.meta.get("t_min", 0.005))


# ----------------------------------------------------------------------------
# commands


def cmd_sample(args) -> int:
    started = _now()
    cfg = _load_config(args.config)
    sampler = dict(cfg.get("sampler", {}))
    for key in ("kind", "N", "n", "seed", "alpha", "delta_mu"):
        val = getattr(args, key, None)
        if val is not None:
            sampler[key] = val
    data = mixture_from_config(cfg.get("data", "gmm-2d-ring8"))
    schedule = _schedule(cfg)
    scfg = SamplerConfig.from_dict(sampler)
    score = _score(scfg.score_source, schedule, data, args.score or cfg.get("score_checkpoint"))
    proj = None
    if scfg.kind == "predict-project":
        path = args.proj or cfg.get("proj_checkpoint")
        if path is None:
            raise CheckpointError("predict-project needs --proj CHECKPOINT")
        proj = load_checkpoint(path, kind="projection")
    t0 = time.perf_counter()
    result = run_sampler(scfg, score, schedule, proj=proj, target=data)
    wall_ms = (time.perf_counter() - t0) * 1e3
    pts = result.batch.points
    header = [f"x{j}" for j in range(pts.shape[1])]
    write_csv(args.out, header, pts.tolist())
    outputs = [args.out]
    if args.traj_out:
        rows = [[float(tau), *row] for tau in sorted(result.trajectory) for row in result.trajectory[tau].tolist()]
        write_csv(args.traj_out, ["tau", *header], rows)
        outputs.append(args.traj_out)
    full = {"data": data.to_dict(), "schedule": schedule.to_dict(), "sampler": scfg.to_dict()}
    notes = {"wall_ms": wall_ms, "divergence_count": 0}
    write_manifest(_manifest_path(args, args.out), "sample", full, scfg.seed, started, outputs, notes)
    return EXIT_OK


def _train_common(args):
    cfg = _load_config(args.config)
    train = dict(cfg.get("train", {}))
    for key in ("iterations", "seed", "N"):
        val = getattr(args, key, None)
        if val is not None:
            train[key] = val
    data = mixture_from_config(cfg.get("data", "gmm-2d-ring8"))
    return cfg, TrainConfig.from_dict(train), data, _schedule(cfg)


def _write_curve(out, losses) -> Path:
    curve = Path(str(out) + ".loss.csv")
    write_csv(curve, ["iteration", "loss"], [[i, float(v)] for i, v in enumerate(losses)])
    return curve


def cmd_train_score(args) -> int:
    started = _now()
    _, tcfg, data, schedule = _train_common(args)
    losses = []
    model = train_score_dsm(data, schedule, tcfg, losses=losses)
    save_checkpoint(model, args.out, "score")
    curve = _write_curve(args.out, losses)
    full = {"data": data.to_dict(), "schedule": schedule.to_dict(), "train": tcfg.to_dict()}
    write_manifest(_manifest_path(args, args.out), "train-score", full, tcfg.seed, started,
                   [args.out, curve])
    return EXIT_OK


def cmd_train_projection(args) -> int:
    started = _now()
    cfg, tcfg, data, schedule = _train_common(args)
    score = _score(tcfg.score_source, schedule, data, args.score or cfg.get("score_checkpoint"))
    losses = []
    model = train_projection(data, schedule, score, tcfg, losses=losses)
    save_checkpoint(model, args.out, "projection")
    curve = _write_curve(args.out, losses)
    full = {"data": data.to_dict(), "schedule": schedule.to_dict(), "train": tcfg.to_dict()}
    write_manifest(_manifest_path(args, args.out), "train-projection", full, tcfg.seed, started,
                   [args.out, curve])
    return EXIT_OK


def pde_report(data, schedule, x_min=-8.0, x_max=8.0, m=512, dt=1e-4, times=(0.25, 0.5, 1.0),
               max_substeps=64) -> dict:
    """Evolve the data density with both solvers and compare at each time."""
    fp = wgf = grid_from_mixture(data, x_min, x_max, m)
    t_prev = 0.0
    report = {"grid": {"x_min": x_min, "x_max": x_max, "m": m}, "dt": dt, "times": list(times),
              "l1_fp_vs_wgf": [], "l1_fp_vs_closed_form": [], "mass_drift": [], "clamp_total": []}
    for t in times:
        if not t > t_prev:
            raise ConfigError("times must be increasing and positive")
        fp = fokker_planck_evolve(fp, schedule, t_prev, t, dt, max_substeps)
        wgf = wgf_evolve(wgf, schedule, t_prev, t, dt, max_substeps)
        exact = grid_from_mixture(gmm_diffuse(data, t, schedule), x_min, x_max, m)
        report["l1_fp_vs_wgf"].append(l1_distance(fp, wgf))
        report["l1_fp_vs_closed_form"].append(l1_distance(fp, exact))
        report["mass_drift"].append(max(fp.diagnostics["mass_drift"], wgf.diagnostics["mass_drift"]))
        report["clamp_total"].append(fp.diagnostics["clamp_total"] + wgf.diagnostics["clamp_total"])
        t_prev = t
    return report


def cmd_pde_check(args) -> int:
    started = _now()
    cfg = _load_config(args.config)
    data = mixture_from_config(cfg.get("data", args.preset))
    if data.dim != 1:
        raise ConfigError("pde-check needs a 1D mixture")
    schedule = _schedule(cfg)
    times = tuple(float(t) for t in args.times.split(","))
    report = pde_report(data, schedule, args.x_min, args.x_max, args.grid, args.dt, times, args.max_substeps)
    report["threshold"] = args.threshold
    write_json(args.out, report)
    full = {"data": data.to_dict(), "schedule": schedule.to_dict(), "grid": report["grid"], "dt": args.dt,
            "times": list(times), "threshold": args.threshold, "max_substeps": args.max_substeps}
    notes = {"clamp_total": sum(report["clamp_total"])}
    write_manifest(_manifest_path(args, args.out), "pde-check", full, None, started, [args.out], notes)
    worst = max(report["l1_fp_vs_wgf"])
    if not worst < args.threshold:
        print(f"wgflow: pde-check L1(FP, WGF) = {worst:.3g} not below {args.threshold:g}", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def sweep_rows(data, schedule, score, samplers, steps, n, seed, seeds, metric="sliced",
               projections=DEFAULT_PROJECTIONS, proj_models=None, max_size=512):
    """One row per (sampler, N): mean W2 to a fresh data draw over ``seeds`` consecutive seeds."""
    proj_models = proj_models or {}
    rows = []
    for kind in samplers:
        for N in steps:
            proj = proj_models.get(N) if kind == "predict-project" else None
            if kind == "predict-project" and proj is None:
                raise CheckpointError(f"no projection checkpoint for N={N}")
            values = []
            for s in range(seed, seed + seeds):
                cfg = SamplerConfig(kind=kind, N=N, n=n, seed=s, score_source=_source(score))
                pts = run_sampler(cfg, score, schedule, proj=proj, target=data).batch.points
                values.append(w2_to_mixture(pts, data, s, metric, projections, max_size).value)
            dmu = default_delta_mu(N) if kind == "predict-project" else 0.0
            rows.append([kind, N, float(dmu), metric, float(np.mean(values)), seed])
    return rows


def _source(score) -> str:
    return "learned" if isinstance(score, LearnedScore) else "analytic"


def cmd_eval_sweep(args) -> int:
    started = _now()
    cfg = _load_config(args.config)
    data = mixture_from_config(cfg.get("data", "gmm-2d-ring8"))
    schedule = _schedule(cfg)
    samplers = args.samplers.split(",") if args.samplers else cfg.get("samplers", ["reverse-sde", "predict-project"])
    steps = [int(s) for s in (args.steps.split(",") if args.steps else cfg.get("steps", [20, 40, 100]))]
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    seeds = int(args.seeds if args.seeds is not None else cfg.get("seeds", 5))
    n = int(args.n if args.n is not None else cfg.get("n", 20000))
    metric = args.metric or cfg.get("metric", "sliced")
    if metric not in ("sliced", "exact"):
        raise ConfigError(f"unknown metric {metric!r}")
    score = _score(cfg.get("score_source", "analytic"), schedule, data,
                   args.score or cfg.get("score_checkpoint"))
    paths = {int(k): v for k, v in cfg.get("proj_checkpoints", {}).items()}
    for item in args.proj or []:
        key, _, path = item.partition("=")
        paths[int(key)] = path
    proj_models = {}
    if "predict-project" in samplers:
        for N in steps:
            if N not in paths:
                raise CheckpointError(f"predict-project needs a projection checkpoint for N={N}")
            proj_models[N] = load_checkpoint(paths[N], kind="projection")
    rows = sweep_rows(data, schedule, score, samplers, steps, n, seed, seeds, metric,
                      int(cfg.get("projections", DEFAULT_PROJECTIONS)), proj_models)
    write_csv(args.out, ["sampler", "N", "delta_mu", "metric", "value", "seed"], rows)
    full = {"data": data.to_dict(), "schedule": schedule.to_dict(), "samplers": samplers, "steps": steps,
            "n": n, "seed": seed, "seeds": seeds, "metric": metric,
            "proj_checkpoints": {str(k): str(v) for k, v in sorted(paths.items())}}
    write_manifest(_manifest_path(args, args.out), "eval-sweep", full, seed, started, [args.out])
    return EXIT_OK


def oracle_report(seed=0, iterations=2000, h_values=(0.01, 0.005), instances=10) -> dict:
    """Quadratic Wasserstein-gradient oracle plus the backprop gradient check."""
    rng = np.random.default_rng(seed)
    center = np.array([1.0, -0.5])
    J = QuadraticFunctional(center)
    x_test = rng.standard_normal((2000, 2))
    wgrad = []
    for h in h_values:
        model = wgrad_estimate(J, standard_normal(2), h, TrainConfig(iterations=iterations, seed=seed))
        t_map = mlp_forward(model, x_test, 0.0)
        exact = J.exact_minimizer(x_test, h)
        rel = np.linalg.norm(t_map - exact, axis=1) / np.linalg.norm(exact, axis=1)
        first = -h * 2.0 * (x_test - center)
        wgrad.append({"h": h, "frac_within_10pct": float(np.mean(rel < 0.1)),
                      "first_order_error": float(np.linalg.norm(t_map - first) / np.linalg.norm(first))})
    errors = []
    for i in range(instances):
        d = int(rng.integers(1, 4))
        hidden = tuple(int(w) for w in rng.integers(4, 17, size=int(rng.integers(1, 4))))
        model = mlp_init(d, hidden, rng)
        model.weights[-1] = rng.standard_normal(model.weights[-1].shape) * 0.5
        model.biases[-1] = rng.standard_normal(model.biases[-1].shape) * 0.1
        n = int(rng.integers(1, 6))
        x = rng.standard_normal((n, d))
        errors.append(gradient_check(model, x, rng.uniform(0, 1, n), rng.standard_normal((n, d))))
    return {"wgrad": wgrad, "gradcheck_max_rel_error": max(errors), "gradcheck_errors": errors}


def cmd_oracle_check(args) -> int:
    started = _now()
    report = oracle_report(args.seed or 0, args.iterations)
    ok = report["gradcheck_max_rel_error"] < 1e-4 and all(
        w["frac_within_10pct"] >= 0.95 for w in report["wgrad"])
    report["pass"] = ok
    write_json(args.out, report)
    write_manifest(_manifest_path(args, args.out), "oracle-check",
                   {"seed": args.seed or 0, "iterations": args.iterations}, args.seed or 0, started, [args.out])
    return EXIT_OK if ok else EXIT_THRESHOLD


# ----------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wgflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--manifest", help="manifest path (default: OUT.manifest.json)")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("sample", help="generate samples")
    common(p, "samples CSV")
    p.add_argument("--kind")
    p.add_argument("--N", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--delta-mu", dest="delta_mu", type=float)
    p.add_argument("--score", help="score checkpoint (score_source=learned)")
    p.add_argument("--proj", help="projection checkpoint (kind=predict-project)")
    p.add_argument("--traj-out", dest="traj_out", help="CSV of states at the configured tau checkpoints")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train-score", help="denoising score matching")
    common(p, "checkpoint JSON")
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_train_score)

    p = sub.add_parser("train-projection", help="train the predict-project map")
    common(p, "checkpoint JSON")
    p.add_argument("--iterations", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--score", help="score checkpoint (score_source=learned)")
    p.set_defaults(func=cmd_train_projection)

    p = sub.add_parser("pde-check", help="Fokker-Planck vs gradient-flow solver agreement")
    common(p, "report JSON")
    p.add_argument("--preset", default="gmm-1d-bimodal")
    p.add_argument("--grid", type=int, default=512)
    p.add_argument("--x-min", dest="x_min", type=float, default=-8.0)
    p.add_argument("--x-max", dest="x_max", type=float, default=8.0)
    p.add_argument("--dt", type=float, default=1e-4)
    p.add_argument("--times", default="0.25,0.5,1.0")
    p.add_argument("--threshold", type=float, default=1e-2)
    p.add_argument("--max-substeps", dest="max_substeps", type=int, default=64)
    p.set_defaults(func=cmd_pde_check)

    p = sub.add_parser("eval-sweep", help="W2 sweep over samplers and step counts")
    common(p, "sweep CSV")
    p.add_argument("--score", help="score checkpoint (score_source=learned)")
    p.add_argument("--proj", action="append", metavar="N=PATH", help="projection checkpoint per step count")
    p.add_argument("--steps", help="comma-separated step counts, e.g. 20,40,100")
    p.add_argument("--samplers", help="comma-separated sampler kinds")
    p.add_argument("--metric", choices=("exact", "sliced"))
    p.add_argument("--n", type=int, help="samples per run")
    p.add_argument("--seeds", type=int, help="number of consecutive seeds averaged per row")
    p.set_defaults(func=cmd_eval_sweep)

    p = sub.add_parser("oracle-check", help="Wasserstein-gradient oracle and gradient check")
    common(p, "report JSON")
    p.add_argument("--iterations", type=int, default=2000)
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"wgflow: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DivergenceError, BlowupError, FloatingPointError) as exc:
        print(f"wgflow: aborted: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (StabilityError, ValueError, TypeError, KeyError) as exc:
        print(f"wgflow: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
