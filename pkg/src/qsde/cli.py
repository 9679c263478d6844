"""Command-line interface.

Subcommands: forward-converge, quadrature, zvonkin, btz-run, btz-converge,
compare-oracle. Exit codes: 0 success, 1 validation error, 2 numerical
failure, 3 acceptance-check failure.
"""

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from qsde.btz import WeightSpec, run_btz, check_uniform_bound
from qsde.config import parse_config, study_from_config
from qsde.errors import NumericalError
from qsde.forward import euler_maruyama, make_drift
from qsde.grids import GAUSSIAN, make_uniform_partition, sample_noise
from qsde.harness import StudySpec, run_study, _btz_objects, _make_est, _available_oracle
from qsde.zvonkin import PdeGrid, find_lambda, solve_mild, transform_drift

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_ACCEPTANCE = 3


def _load_spec(args, scheme: str) -> StudySpec:
    if args.config:
        with open(args.config) as f:
            cfg = parse_config(f.read())
    else:
        cfg = {}
    spec = study_from_config(cfg, seed=args.seed, threads=args.threads, out=None)
    out = args.out
    if out:
        os.makedirs(out, exist_ok=True)
        out = os.path.join(out, f"{scheme}.csv")
    return replace(spec, scheme=scheme, out=out)


def _cmd_converge(args, scheme: str) -> int:
    spec = _load_spec(args, scheme)
    report = run_study(spec)
    order = -report.slope
    print(f"{scheme}: fitted order {order:.3f} (stderr {report.stderr:.3f}) over N={list(spec.n_sweep)}")
    for r in report.rows:
        print(f"  N={r['N']:<6d} err_y={r['err_y']:.6e} +-{r['err_y_ci']:.1e} "
              f"err_z={r['err_z']:.6e} +-{r['err_z_ci']:.1e}")
    if "oracle_y0" in report.meta:
        print(f"  oracle y0={report.meta['oracle_y0']:.9f} gap={report.meta['y0_gap']:.3e}")
    if spec.out:
        print(f"  wrote {spec.out}")
    if args.min_order is not None and not order >= args.min_order:
        print(f"FAIL: order {order:.3f} < required {args.min_order}")
        return EXIT_ACCEPTANCE
    if args.max_order is not None and not order <= args.max_order:
        print(f"FAIL: order {order:.3f} > allowed {args.max_order}")
        return EXIT_ACCEPTANCE
    return EXIT_OK


def _cmd_zvonkin(args) -> int:
    spec = _load_spec(args, "zvonkin")
    z = spec.zvonkin
    drift = make_drift(**spec.drift)
    tol = float(z.get("tol", 1e-8))
    kw = dict(nt=int(z.get("nt", 64)), L=float(z.get("L", 15.0)), dx=float(z.get("dx", 0.05)))
    if "lam" in z:
        grid = PdeGrid(drift=drift, lam=float(z["lam"]), T=spec.T, **kw)
        sol = solve_mild(grid, tol=tol, max_iter=int(z.get("max_iter", 80)))
        lam = float(z["lam"])
    else:
        lam, sol, _ = find_lambda(drift, T=spec.T, target=float(z.get("target", 0.5)),
                                  tol=tol, max_iter=int(z.get("max_iter", 80)), **kw)
    if not sol.converged:
        print(f"zvonkin: no convergence (last contraction {sol.contraction:.3f})")
        return EXIT_NUMERICAL
    summary = {"lam": lam, "residual": sol.residual, "sup_du": sol.sup_du,
               "iterations": sol.iterations}
    print("zvonkin:", " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                               for k, v in summary.items()))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "zvonkin.csv")
        x = sol.grid.x
        with open(path, "w", newline="") as f:
            f.write("t,x,u,du\n")
            for k, t in enumerate(sol.grid.tau):
                for j in range(x.size):
                    f.write("%.12g,%.12g,%.12g,%.12g\n" % (t, x[j], sol.u[k, j], sol.du[k, j]))
        print(f"  wrote {path}")
        transform_drift(sol)  # validates the diffeomorphism precondition
    return EXIT_OK


def _cmd_btz_run(args) -> int:
    spec = _load_spec(args, "btz")
    n = spec.n_sweep[0]
    drift, g, gn, phi, wspec = _btz_objects(spec)
    p = make_uniform_partition(spec.T, n)
    mode = "rademacher" if spec.condexp.get("backend") == "exact-tree" else GAUSSIAN
    if spec.condexp.get("backend") == "exact-tree":
        from qsde.grids import enumerate_rademacher

        noise = enumerate_rademacher(p)
        wspec = WeightSpec(kind="rademacher-native")
    else:
        noise = sample_noise(p, spec.paths, spec.d, mode, spec.seed)
    fwd = euler_maruyama(spec.x0, drift, noise)
    sol = run_btz(fwd, phi, gn, _make_est(spec), wspec)
    bc = check_uniform_bound(sol, gn.lam0, gn.lam_y)
    print(f"btz-run: N={n} M={sol.M} y0={sol.y0:.9f} z0={sol.z0[0]:.9f}")
    print(f"  uniform bound {bc.bound:.4f} max|Y|={bc.max_abs:.4f} margin={bc.margin:.4f} ok={bc.ok}")
    if spec.out:
        import csv as _csv

        with open(spec.out.replace("btz.csv", "btz-run.csv") if spec.out.endswith("btz.csv") else spec.out, "w", newline="") as f:
            w = _csv.writer(f)
            w.writerow(["i", "t", "y_mean", "z_mean"])
            for j, i in enumerate(sol.record_idx):
                w.writerow(["%d" % i, "%.12g" % p.t[i], "%.12g" % sol.y[:, j].mean(),
                            "%.12g" % sol.z[:, j, 0].mean()])
        print(f"  wrote {spec.out}")
    return EXIT_OK


def _cmd_compare_oracle(args) -> int:
    spec = _load_spec(args, "btz")
    n = spec.n_sweep[-1]
    drift, g, gn, phi, wspec = _btz_objects(spec)
    orc = _available_oracle(spec, phi)
    if orc is None:
        print("compare-oracle: no closed-form oracle for this configuration")
        return EXIT_VALIDATION
    p = make_uniform_partition(spec.T, n)
    noise = sample_noise(p, spec.paths, spec.d, GAUSSIAN, spec.seed)
    fwd = euler_maruyama(spec.x0, drift, noise)
    sol = run_btz(fwd, phi, gn, _make_est(spec), wspec)
    gap = abs(sol.y0 - orc.y0)
    ci = sol.diagnostics.get("y0_stat_ci", 0.0)
    print(f"compare-oracle: N={n} y0={sol.y0:.9f} oracle={orc.y0:.9f} gap={gap:.3e} ci={ci:.3e}")
    if args.tol is not None and gap > args.tol + 3.0 * ci:
        print(f"FAIL: gap {gap:.3e} exceeds {args.tol} + 3*CI")
        return EXIT_ACCEPTANCE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qsde", description=__doc__)
    ap.add_argument("--config", help="INI config path")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--out", default=None, help="output directory")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("forward-converge", "quadrature", "btz-converge"):
        s = sub.add_parser(name)
        s.add_argument("--min-order", type=float, default=None)
        s.add_argument("--max-order", type=float, default=None)
    sub.add_parser("zvonkin")
    sub.add_parser("btz-run")
    s = sub.add_parser("compare-oracle")
    s.add_argument("--tol", type=float, default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "forward-converge":
            return _cmd_converge(args, "forward")
        if args.command == "quadrature":
            return _cmd_converge(args, "quadrature")
        if args.command == "btz-converge":
            return _cmd_converge(args, "btz")
        if args.command == "zvonkin":
            return _cmd_zvonkin(args)
        if args.command == "btz-run":
            return _cmd_btz_run(args)
        if args.command == "compare-oracle":
            return _cmd_compare_oracle(args)
        return EXIT_VALIDATION
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
