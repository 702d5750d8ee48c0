"""Command-line interface.

Subcommands: ``solve`` (JSON-configured run), ``gen`` (problem bundles),
``experiment-numdiff``, ``experiment-tomo`` and ``compat``. Results are CSV
and JSON files; no figures are rendered. Output directories default to
``$IASREG_OUTPUT/<command>`` (``./iasreg-output`` when unset).

Exit codes: 0 on success/convergence, 2 when output was written but a
solver did not converge, 1 on errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .classic import MorozovOptions, alpha_from_theta, morozov_bisect
from .hyperprior import GenGammaParams, compat_residuals, hybrid_compat_solve, select_scale_snr
from .ias import HybridOptions, IasOptions, hybrid_ias_solve, ias_solve
from .krylov import KrylovOptions
from .operators import compose, frobenius_norm_sq, write_csv
from .problems import export_bundle, load_bundle, make_numdiff, make_tomo, snr_estimate
from .regularizer import L_KINDS, Partition, build_L, scale_by_theta

SUMMARY_VERSION = 1
ENV_OUTPUT = "IASREG_OUTPUT"


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


def output_root() -> Path:
    return Path(os.environ.get(ENV_OUTPUT, "iasreg-output"))


# ---------------------------------------------------------------------------
# configuration


SCHEMA = {
    "problem": {"generator", "params", "bundle"},
    "prior": {"L", "partition", "r", "beta", "eta", "vartheta", "snr"},
    "solver": {"kind", "delta", "max_outer", "rel_residual_tol", "max_steps", "reorthogonalize",
               "low_memory", "r2", "switch_rule", "count", "switch_tol", "alpha_min", "alpha_max",
               "rel_tol", "max_bisect"},
}
TOP_KEYS = {"problem", "prior", "solver", "output"}
GENERATORS = {"numdiff": {"n", "sigma_rel", "seed"},
              "tomo": {"nx", "ny", "n_rays", "n_views", "noise_pct", "seed"}}
SOLVERS = ("ias", "hybrid", "tikhonov-morozov")


def _reject_unknown(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {extra}")


def validate_config(cfg: dict, base: Path | None = None) -> dict:
    """Check a run configuration and fill in defaults."""
    _reject_unknown(cfg, TOP_KEYS, "config")
    for key in ("problem", "prior", "solver"):
        if key not in cfg:
            raise ConfigError(f"{key}: missing section")
        _reject_unknown(cfg[key], SCHEMA[key], key)
    prob = cfg["problem"]
    if ("generator" in prob) == ("bundle" in prob):
        raise ConfigError("problem: give exactly one of 'generator' or 'bundle'")
    if "generator" in prob:
        gen = prob["generator"]
        if gen not in GENERATORS:
            raise ConfigError(f"problem.generator: unknown generator {gen!r}")
        _reject_unknown(prob.get("params", {}), GENERATORS[gen], "problem.params")
    else:
        path = Path(prob["bundle"])
        if base is not None and not path.is_absolute():
            path = base / path
        if not (path / "metadata.json").exists():
            raise ConfigError(f"problem.bundle: no bundle at {path}")
        prob["bundle"] = str(path)
    prior = cfg["prior"]
    if prior.get("L", "identity") not in L_KINDS:
        raise ConfigError(f"prior.L: must be one of {L_KINDS}")
    if "beta" in prior and "eta" in prior:
        raise ConfigError("prior: give 'beta' or 'eta', not both")
    v = prior.get("vartheta", "snr")
    if v != "snr" and not (isinstance(v, (int, float)) and v > 0):
        raise ConfigError("prior.vartheta: must be a positive number or 'snr'")
    if prior.get("r", 1) == 0:
        raise ConfigError("prior.r: must be nonzero")
    solver = cfg["solver"]
    if solver.get("kind") not in SOLVERS:
        raise ConfigError(f"solver.kind: must be one of {SOLVERS}")
    delta = solver.get("delta", 0.01)
    if not 0 < delta < 1:
        raise ConfigError("solver.delta: must lie in (0, 1)")
    return cfg


def _load_problem(spec):
    if "bundle" in spec:
        return load_bundle(spec["bundle"])
    params = dict(spec.get("params", {}))
    if spec["generator"] == "numdiff":
        return make_numdiff(**params)
    return make_tomo(**params)


def _partition_from(spec, k):
    if spec is None or isinstance(spec, str):
        return spec
    return Partition.from_groups(spec, k, one_based=True)


def _prior_from(prior, problem, Lop, white):
    sizes = Lop.partition.sizes
    r = float(prior.get("r", 1.0))
    if "beta" in prior:
        betas = np.broadcast_to(np.asarray(prior["beta"], float), sizes.shape)
    else:
        eta = float(prior.get("eta", 1e-3))
        betas = (eta + (sizes + 2) / 2) / r
    v = prior.get("vartheta", "snr")
    if v == "snr":
        P = scale_by_theta(Lop, np.ones(Lop.partition.n_groups)).pinv()
        frob = frobenius_norm_sq(compose(white.A, P), exact=white.n <= 4000).value
        snr = float(prior["snr"]) if "snr" in prior else snr_estimate(white.b, white.m, 1.0)
        v = select_scale_snr(frob, white.m, 1.0, snr, float(np.mean(betas)))
    return GenGammaParams(r, np.array(betas, float), np.full(sizes.shape, float(v)))


def _krylov_from(solver):
    return KrylovOptions(max_steps=int(solver.get("max_steps", 1000)),
                         rel_residual_tol=float(solver.get("rel_residual_tol", 1e-8)),
                         reorthogonalize=bool(solver.get("reorthogonalize", True)),
                         low_memory=bool(solver.get("low_memory", False)))


def run_config(cfg: dict, out: Path) -> bool:
    """Execute a validated configuration; returns the convergence flag."""
    problem = _load_problem(cfg["problem"])
    white = problem.whitened()
    prior = cfg["prior"]
    L_kind = prior.get("L", problem.metadata.get("default_L", {}).get("kind", "identity"))
    part = _partition_from(prior.get("partition"), None)
    if L_kind == "grid_incidence":
        Lop = problem.default_L(partition=part) if "mask" in problem.metadata else None
        if Lop is None:
            raise ConfigError("prior.L: grid_incidence needs a tomography problem")
    else:
        Lop = build_L(L_kind, n=problem.n, partition=part)
    solver = cfg["solver"]
    kopts = _krylov_from(solver)
    sigma_raw = problem.sigma
    t0 = time.perf_counter()
    summary = {"schema_version": SUMMARY_VERSION, "package_version": __version__, "solver": solver["kind"],
               "problem": problem.metadata.get("name", "bundle"), "m": problem.m, "n": problem.n,
               "sigma": sigma_raw, "config": cfg}
    if solver["kind"] == "tikhonov-morozov":
        mopts = MorozovOptions(alpha_min=float(solver.get("alpha_min", 1e-16)),
                               alpha_max=float(solver.get("alpha_max", 1e10)),
                               rel_tol=float(solver.get("rel_tol", 0.01)),
                               max_bisect=int(solver.get("max_bisect", 60)))
        res = morozov_bisect(problem.A, Lop, problem.b, sigma_raw, problem.m, mopts, kopts)
        x, theta = res.x, np.array([sigma_raw**2 / res.alpha])
        converged = res.converged
        summary.update(converged=converged, alpha=res.alpha, evals=res.evals, bracket_valid=res.bracket_valid,
                       trace=[[a, h] for a, h in res.trace])
    else:
        params = _prior_from(prior, problem, Lop, white)
        opts = IasOptions(delta=float(solver.get("delta", 0.01)), max_outer=int(solver.get("max_outer", 100)),
                          krylov=kopts)
        if solver["kind"] == "hybrid":
            opts.hybrid = HybridOptions(r2=float(solver.get("r2", 0.5)),
                                        switch_rule=solver.get("switch_rule", "stagnation"),
                                        count=int(solver.get("count", 0)), tol=solver.get("switch_tol"))
            res = hybrid_ias_solve(white, Lop, params, opts)
        else:
            res = ias_solve(white, Lop, params, opts)
        x, theta = res.x, res.theta
        converged = res.converged
        s = res.summary()
        summary["timings"] = {"phase1_seconds": s.pop("phase1_seconds"), "phase2_seconds": s.pop("phase2_seconds")}
        s.pop("inner")
        summary.update(s)
        summary["hyperparameters"] = params.to_dict()
        summary["alpha_equivalent"] = np.atleast_1d(alpha_from_theta(sigma_raw, theta)).tolist()
        summary["alpha_equivalent_squared"] = (sigma_raw**2 / np.asarray(theta)).tolist()
    summary.setdefault("timings", {})["total_seconds"] = time.perf_counter() - t0
    if problem.x_true is not None:
        summary["relative_error"] = float(np.linalg.norm(x - problem.x_true) / np.linalg.norm(problem.x_true))
    # nothing is written until the run has finished
    out.mkdir(parents=True, exist_ok=True)
    if solver["kind"] == "tikhonov-morozov":
        res.write_trace(out / "morozov_trace.csv")
    write_csv(out / "solution.csv", x)
    write_csv(out / "theta.csv", theta)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, default=_json_default))
    return bool(converged)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


# ---------------------------------------------------------------------------
# experiments


NUMDIFF_COLUMNS = ["sigma_rel", "alpha_tikh", "alpha_ias", "evals_tikh", "iters_ias", "relerr_tikh", "relerr_ias",
                   "alpha_ias_squared", "theta_ias", "ias_converged", "tikh_converged", "error"]


def numdiff_level(sigma_rel, n=50, seed=0, eta=1e-4, delta=0.01):
    """IAS and Morozov on one noise level of the differentiation problem.

    IAS runs on the whitened data with ``L = diff2`` as a single group of
    size ``n`` (one variance, so ``sigma / sqrt(theta)`` is a single
    regularization parameter). ``vartheta`` comes from the data SNR with
    the Frobenius norm of ``A L^{-1}``, the forward map seen by the prior.
    """
    problem = make_numdiff(n, sigma_rel, seed)
    white = problem.whitened()
    Lop = build_L("diff2", n=n, partition="trivial")
    beta = (n + 2) / 2 + eta
    P = scale_by_theta(Lop, [1.0]).pinv()
    frob = frobenius_norm_sq(compose(white.A, P), exact=True).value
    vartheta = select_scale_snr(frob, n, 1.0, snr_estimate(white.b, n, 1.0), beta)
    params = GenGammaParams(1.0, [beta], [vartheta])
    res = ias_solve(white, Lop, params, IasOptions(delta=delta))
    mor = morozov_bisect(problem.A, Lop, problem.b, problem.sigma, n)
    xt = problem.x_true
    rel = lambda x: float(np.linalg.norm(x - xt) / np.linalg.norm(xt))  # noqa: E731
    row = {"sigma_rel": sigma_rel, "alpha_tikh": mor.alpha, "alpha_ias": alpha_from_theta(problem.sigma, res.theta[0]),
           "evals_tikh": mor.evals, "iters_ias": res.outer_iterations, "relerr_tikh": rel(mor.x),
           "relerr_ias": rel(res.x), "alpha_ias_squared": problem.sigma**2 / res.theta[0], "theta_ias": res.theta[0],
           "ias_converged": res.converged, "tikh_converged": mor.converged, "error": ""}
    return row, res, mor


def run_numdiff_experiment(out: Path | None, n=50, levels=30, lo=1e-3, hi=1e-1, seed=0):
    """Sweep log-spaced noise levels; returns the table rows (and writes CSVs when ``out`` is set)."""
    rows, results = [], []
    for s in np.logspace(np.log10(lo), np.log10(hi), levels):
        try:
            row, res, mor = numdiff_level(float(s), n, seed)
            results.append(res)
            if out is not None:
                (out / "morozov_traces").mkdir(parents=True, exist_ok=True)
                mor.write_trace(out / "morozov_traces" / f"sigma_{s:.6e}.csv")
        except Exception as exc:  # recorded per level, sweep continues
            row = {c: float("nan") for c in NUMDIFF_COLUMNS}
            row.update(sigma_rel=float(s), error=f"{type(exc).__name__}: {exc}")
            results.append(None)
        rows.append(row)
    if out is not None:
        with open(out / "numdiff.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=NUMDIFF_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    return rows, results


def _grid_image(x, mask):
    img = np.zeros(mask.shape)
    img[mask] = x
    return img


def run_tomo_experiment(out: Path | None, grid=(32, 32), rays=60, views=10, noise_pct=1.0, eta=1e-3,
                        vartheta=0.05, seed=0, qr=True, qr_cap=2e7):
    """IAS reconstruction with implicit and (optionally) QR pseudoinverses."""
    ny, nx = grid
    problem = make_tomo(nx, ny, rays, views, noise_pct, seed)
    white = problem.whitened()
    Lop = problem.default_L()
    params = GenGammaParams.from_eta(eta, vartheta, Lop.partition.sizes)
    res = ias_solve(white, Lop, params, IasOptions(keep_history=True))
    report = {"m": problem.m, "n": problem.n, "k": Lop.shape[0], "dropped_rays": problem.metadata["dropped_rays"],
              "sigma": problem.sigma, "implicit": _tomo_stats(problem, res)}
    res_qr = None
    if qr:
        k, n = Lop.shape
        if k * n > qr_cap:
            report["qr"] = {"skipped": f"k*n = {k * n} exceeds the cap {qr_cap:g}"}
            print(f"notice: QR path skipped, {report['qr']['skipped']}", file=sys.stderr)
        else:
            res_qr = ias_solve(white, Lop, params, IasOptions(pinv="qr"))
            report["qr"] = _tomo_stats(problem, res_qr)
            report["qr_vs_implicit_relative_difference"] = float(
                np.linalg.norm(res_qr.x - res.x) / np.linalg.norm(res.x))
            report["time_ratio_implicit_over_qr"] = (report["implicit"]["median_iteration_seconds"]
                                                     / report["qr"]["median_iteration_seconds"])
    if out is not None:
        mask = np.asarray(problem.metadata["mask"], bool)
        snap = out / "snapshots"
        snap.mkdir(parents=True, exist_ok=True)
        for i, (x, th) in enumerate(zip(res.x_history, res.theta_history), 1):
            write_csv(snap / f"iter_{i:02d}_x.csv", _grid_image(x, mask))
            write_csv(snap / f"iter_{i:02d}_theta.csv", th)
        write_csv(out / "x_true.csv", _grid_image(problem.x_true, mask))
        with open(out / "iterations.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective", "theta_change", "inner_steps", "residual", "rel_error"])
            for i, x in enumerate(res.x_history):
                r = np.linalg.norm(problem.b - problem.A.forward(x)) / np.linalg.norm(problem.b)
                e = np.linalg.norm(x - problem.x_true) / np.linalg.norm(problem.x_true)
                w.writerow([i + 1, res.objective_history[2 * i + 2], res.theta_change_history[i],
                            res.inner_step_history[i], r, e])
        with open(out / "times.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "implicit_seconds", "qr_seconds"])
            t_imp = np.add(res.phase1_times, res.phase2_times)
            t_qr = np.add(res_qr.phase1_times, res_qr.phase2_times) if res_qr is not None else []
            for i in range(max(len(t_imp), len(t_qr))):
                w.writerow([i + 1, t_imp[i] if i < len(t_imp) else "", t_qr[i] if i < len(t_qr) else ""])
        (out / "summary.json").write_text(json.dumps(report, indent=1, default=_json_default))
    return report, res, res_qr, problem


def _tomo_stats(problem, res):
    x, xt = res.x, problem.x_true
    reg = problem.metadata["regions"]
    kite, disk = x[reg["inclusion0"]].mean(), x[reg["inclusion1"]].mean()
    per_iter = np.add(res.phase1_times, res.phase2_times)
    return {"outer_iterations": res.outer_iterations, "converged": res.converged,
            "relative_error": float(np.linalg.norm(x - xt) / np.linalg.norm(xt)),
            "kite_mean": float(kite), "disk_mean": float(disk), "contrast": float(kite / disk),
            "median_iteration_seconds": float(np.median(per_iter)),
            "objective_history": res.objective_history, "inner_step_history": res.inner_step_history}


# ---------------------------------------------------------------------------
# commands


def _out_dir(args, name) -> Path:
    return Path(args.out) if args.out else output_root() / name


def cmd_solve(args) -> int:
    cfg_path = Path(args.config)
    try:
        cfg = validate_config(json.loads(cfg_path.read_text()), cfg_path.parent)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out) if args.out else Path(cfg["output"]) if "output" in cfg else output_root() / "solve"
    converged = run_config(cfg, out)
    print(f"wrote {out}")
    return 0 if converged else 2


def cmd_gen(args) -> int:
    if args.generator == "numdiff":
        problem = make_numdiff(args.n, args.sigma_rel, args.seed)
    else:
        problem = make_tomo(args.grid[1], args.grid[0], args.rays, args.views, args.noise_pct, args.seed)
    out = _out_dir(args, f"gen-{args.generator}")
    export_bundle(problem, out)
    print(f"wrote {out}")
    return 0


def cmd_experiment_numdiff(args) -> int:
    out = _out_dir(args, "numdiff")
    out.mkdir(parents=True, exist_ok=True)
    rows, _ = run_numdiff_experiment(out, args.n, args.levels, args.range[0], args.range[1], args.seed)
    failed = sum(1 for r in rows if r["error"])
    print(f"wrote {out / 'numdiff.csv'} ({len(rows)} levels, {failed} failed)")
    return 0 if failed == 0 and all(r["ias_converged"] for r in rows) else 2


def cmd_experiment_tomo(args) -> int:
    out = _out_dir(args, "tomo")
    out.mkdir(parents=True, exist_ok=True)
    report, res, _, _ = run_tomo_experiment(out, tuple(args.grid), args.rays, args.views, args.noise_pct,
                                            args.eta, args.vartheta, args.seed, not args.no_qr, args.qr_cap)
    imp = report["implicit"]
    print(f"wrote {out}: {imp['outer_iterations']} iterations, relative error {imp['relative_error']:.3f}")
    return 0 if res.converged else 2


def cmd_compat(args) -> int:
    p1 = GenGammaParams(1.0, [args.beta1], [args.vartheta1])
    beta2, vartheta2 = hybrid_compat_solve(p1, args.r2, args.k)
    res = compat_residuals(args.beta1, args.vartheta1, args.k, beta2[0], vartheta2[0], args.r2)
    print(json.dumps({"r": args.r2, "beta": float(beta2[0]), "vartheta": float(vartheta2[0]),
                      "residuals": [float(r) for r in res]}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iasreg", description="Hierarchical Bayesian regularization of linear inverse "
                                "problems with Krylov inner solvers.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="run a solver from a JSON config")
    s.add_argument("config", help="path to the JSON run configuration")
    s.add_argument("--out", help=f"output directory (default ${ENV_OUTPUT}/solve)")
    s.set_defaults(func=cmd_solve)

    g = sub.add_parser("gen", help="generate a problem bundle (A.mtx, b.csv, metadata.json)")
    g.add_argument("generator", choices=sorted(GENERATORS))
    g.add_argument("--out", help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=50, help="numdiff: number of samples")
    g.add_argument("--sigma-rel", type=float, default=0.01, help="numdiff: relative noise level")
    g.add_argument("--grid", type=int, nargs=2, default=[32, 32], metavar=("NY", "NX"), help="tomo: pixel grid")
    g.add_argument("--rays", type=int, default=60, help="tomo: rays per view")
    g.add_argument("--views", type=int, default=10, help="tomo: number of views")
    g.add_argument("--noise-pct", type=float, default=1.0, help="tomo: noise as percent of max(b0)")
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("experiment-numdiff", help="IAS vs Morozov over a sweep of noise levels")
    e.add_argument("--out", help="output directory")
    e.add_argument("--n", type=int, default=50)
    e.add_argument("--levels", type=int, default=30)
    e.add_argument("--range", type=float, nargs=2, default=[1e-3, 1e-1], metavar=("LO", "HI"))
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_experiment_numdiff)

    t = sub.add_parser("experiment-tomo", help="fan-beam tomography reconstruction and pseudoinverse timings")
    t.add_argument("--out", help="output directory")
    t.add_argument("--grid", type=int, nargs=2, default=[32, 32], metavar=("NY", "NX"))
    t.add_argument("--rays", type=int, default=60)
    t.add_argument("--views", type=int, default=10)
    t.add_argument("--noise-pct", type=float, default=1.0)
    t.add_argument("--eta", type=float, default=1e-3)
    t.add_argument("--vartheta", type=float, default=0.05)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--no-qr", action="store_true", help="skip the dense QR comparison")
    t.add_argument("--qr-cap", type=float, default=2e7, help="largest k*n for the dense QR path")
    t.set_defaults(func=cmd_experiment_tomo)

    c = sub.add_parser("compat", help="second-stage hyperparameters compatible with a gamma hyperprior")
    c.add_argument("--beta1", type=float, required=True)
    c.add_argument("--vartheta1", type=float, required=True)
    c.add_argument("--r2", type=float, required=True, choices=[0.5, -0.5, -1.0])
    c.add_argument("--k", type=int, default=1)
    c.set_defaults(func=cmd_compat)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
