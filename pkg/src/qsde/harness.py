"""Convergence-study orchestration, rate fitting, and reporting.

Sweep points are pure functions of (config, seed, point index); the
opt-in process pool changes scheduling only, never bytes.
"""

import gc
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from qsde.btz import BtzSolution, OracleSolution, WeightSpec, oracle, run_btz
from qsde.condexp import make_estimator
from qsde.drivers import make_driver, make_terminal, truncate_driver
from qsde.btz import default_truncation
from qsde.errors import CouplingError
from qsde.forward import euler_maruyama, make_drift, quadrature_error
from qsde.grids import (
    GAUSSIAN,
    NoiseEnsemble,
    build_refinement,
    make_uniform_partition,
    refine_couple,
    sample_noise,
    sample_noise_paths,
)

CSV_HEADER = "N,h,err_y,err_y_ci,err_z,err_z_ci"


@dataclass(frozen=True)
class StudySpec:
    """One convergence study: scheme, sweep, model selections, seeds."""

    scheme: str  # forward | quadrature | btz | zvonkin
    n_sweep: tuple
    paths: int
    seed: int
    p: int = 1
    T: float = 1.0
    x0: float = 0.0
    d: int = 1
    drift: dict = field(default_factory=lambda: {"name": "zero"})
    driver: dict = field(default_factory=lambda: {"name": "q4"})
    terminal: dict = field(default_factory=lambda: {"kind": "clamp", "K": 1.0})
    weights: dict = field(default_factory=lambda: {"kind": "clamped-gaussian"})
    condexp: dict = field(default_factory=lambda: {"backend": "lsmc", "degree": 3})
    ref_ratio: int = 8
    threads: int = 1
    out: Optional[str] = None
    config_hash: str = ""
    zvonkin: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scheme not in ("forward", "quadrature", "btz", "zvonkin"):
            raise ValueError(f"unknown study scheme {self.scheme!r}")
        if self.scheme != "zvonkin":
            ns = tuple(int(n) for n in self.n_sweep)
            if len(ns) < 2:
                raise ValueError("sweep needs at least two N values for slope fitting")
            if any(b <= a for a, b in zip(ns, ns[1:])):
                raise ValueError("sweep N values must be strictly increasing")
            object.__setattr__(self, "n_sweep", ns)


@dataclass
class ConvergenceReport:
    rows: list  # dicts with N, h, err_y, err_y_ci, err_z, err_z_ci
    slope: float
    intercept: float
    stderr: float
    meta: dict

    def csv_text(self) -> str:
        lines = [f"# config_hash={self.meta.get('config_hash', '')}"]
        lines.append(f"# seed={self.meta.get('seed', '')}")
        lines.append(f"# reference={self.meta.get('reference', '')}")
        lines.append(CSV_HEADER)
        for r in self.rows:
            lines.append(
                ",".join(
                    _fmt(v)
                    for v in (r["N"], r["h"], r["err_y"], r["err_y_ci"], r["err_z"], r["err_z_ci"])
                )
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.csv_text())


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.12g" % float(v)


def fit_rate(rows) -> tuple[float, float, float]:
    """Least squares of ln(err) on ln(N): (slope, intercept, stderr).

    Rows with non-positive error (exact cases) are excluded with a warning.
    """
    pts = [(float(n), float(e)) for n, e in rows]
    kept = [(n, e) for n, e in pts if e > 0.0]
    if len(kept) < len(pts):
        warnings.warn("fit_rate: dropped %d zero/negative error rows" % (len(pts) - len(kept)))
    if len(kept) < 2:
        raise ValueError("slope fitting needs at least two positive error rows")
    x = np.log([n for n, _ in kept])
    y = np.log([e for _, e in kept])
    A = np.column_stack([x, np.ones_like(x)])
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    if len(kept) > 2:
        ssr = float(((A @ coef - y) ** 2).sum())
        sxx = float(((x - x.mean()) ** 2).sum())
        stderr = np.sqrt(ssr / (len(kept) - 2) / sxx) if sxx > 0 else 0.0
    else:
        stderr = 0.0
    return slope, intercept, float(stderr)


@dataclass(frozen=True)
class BtzErrorEntry:
    err_y: float
    err_y_ci: float
    err_z: float
    err_z_ci: float
    reference: str


def btz_error(sol: BtzSolution, ref, rmap=None) -> BtzErrorEntry:
    """errY = E[sup_i |Y_ref(t_i) - Y_i|^2] over the scheme's grid nodes;
    errZ = left-endpoint quadrature of E[sum_i int |Z_ref - Z_i|^2 ds] with
    the reference control piecewise constant.

    ref is a coupled BtzSolution on the rmap.fine grid (recorded at the
    coarse nodes) or an OracleSolution with pathwise value functions.
    """
    p = sol.partition
    if sol.record_idx.size != p.N + 1:
        raise ValueError("btz_error needs the scheme recorded on its full grid")
    delta = p.delta
    if isinstance(ref, OracleSolution):
        if ref.y_at is None or ref.z_at is None:
            raise ValueError("oracle reference lacks pathwise value functions")
        if sol.forward is None:
            raise ValueError("oracle reference needs the forward solution attached")
        X = sol.forward.values[:, :, 0]
        dy2 = np.zeros(sol.M)
        errz_acc = np.zeros(sol.M)
        for i in range(p.N + 1):
            yref = ref.y_at(p.t[i], X[:, i])
            dy2 = np.maximum(dy2, (yref - sol.y[:, i]) ** 2)
            if i < p.N:
                zref = ref.z_at(p.t[i], X[:, i])
                errz_acc += delta[i] * (zref - sol.z[:, i, 0]) ** 2
        ref_name = f"oracle:{ref.kind}"
    else:
        if rmap is None:
            raise CouplingError("coupled reference needs the refinement map")
        if sol.M != ref.M:
            raise CouplingError("reference path count differs")
        idx = [ref.index_of(int(i)) for i in rmap.bounds]
        yref = ref.y[:, idx]
        zref = ref.z[:, idx, :]
        dy2 = ((yref - sol.y) ** 2).max(axis=1)
        errz_acc = (delta[None, :] * ((zref[:, :-1, :] - sol.z[:, :-1, :]) ** 2).sum(axis=2)).sum(axis=1)
        ref_name = f"coupled:{rmap.ratio}x"
    m = sol.M
    err_y = float(dy2.mean())
    err_y_ci = float(1.96 * dy2.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    err_z = float(errz_acc.mean())
    err_z_ci = float(1.96 * errz_acc.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    return BtzErrorEntry(err_y, err_y_ci, err_z, err_z_ci, ref_name)


def _point_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(k,)).generate_state(1, np.uint64)[0])


def _forward_rows(spec: StudySpec) -> list[dict]:
    """Coupled ladder: one master fine grid, every sweep point and its
    reference derived from the same Brownian paths; streamed over path
    chunks (substreams make chunking invisible)."""
    sweep = spec.n_sweep
    rr = spec.ref_ratio
    n_master = max(sweep) * rr
    for n in sweep:
        if n_master % (n * rr) != 0 or n_master % n != 0:
            raise ValueError("sweep values must divide the master grid")
    master = make_uniform_partition(spec.T, n_master)
    drift = make_drift(**spec.drift)
    parts = {}
    for n in sweep:
        parts[n] = make_uniform_partition(spec.T, n)
        parts[n * rr] = make_uniform_partition(spec.T, n * rr)
    rmaps = {n: build_refinement(parts[n * rr], parts[n]) for n in sweep}
    master_maps = {n: build_refinement(master, parts[n]) for n in sweep}
    master_ref_maps = {n: build_refinement(master, parts[n * rr]) for n in sweep}

    sup_abs = {n: [] for n in sweep}
    chunk = max(64, int(2**24 // max(n_master, 1)))
    for m0 in range(0, spec.paths, chunk):
        m1 = min(m0 + chunk, spec.paths)
        inc = sample_noise_paths(master, m0, m1, spec.d, GAUSSIAN, spec.seed)
        ens = NoiseEnsemble(partition=master, mode=GAUSSIAN, increments=inc, seed=spec.seed)
        for n in sweep:
            coarse = refine_couple(ens, master_maps[n])
            ref = refine_couple(ens, master_ref_maps[n])
            sol_c = euler_maruyama(spec.x0, drift, coarse)
            sol_r = euler_maruyama(spec.x0, drift, ref)
            diff = sol_c.values - sol_r.values[:, rmaps[n].bounds, :]
            sup_abs[n].append(np.sqrt((diff**2).sum(axis=2)).max(axis=1))
        del inc, ens
        gc.collect()

    rows = []
    for n in sweep:
        s = np.concatenate(sup_abs[n])
        m2 = s**2
        m2p = s ** (2 * spec.p)
        err_y = float(m2.mean()) ** 0.5
        lo = max(float(m2.mean()) - 1.96 * float(m2.std(ddof=1)) / np.sqrt(s.size), 0.0)
        hi = float(m2.mean()) + 1.96 * float(m2.std(ddof=1)) / np.sqrt(s.size)
        err_y_ci = 0.5 * (hi**0.5 - lo**0.5)
        e2p = float(m2p.mean()) ** (1.0 / (2 * spec.p))
        lo2 = max(float(m2p.mean()) - 1.96 * float(m2p.std(ddof=1)) / np.sqrt(s.size), 0.0)
        hi2 = float(m2p.mean()) + 1.96 * float(m2p.std(ddof=1)) / np.sqrt(s.size)
        e2p_ci = 0.5 * (hi2 ** (1.0 / (2 * spec.p)) - lo2 ** (1.0 / (2 * spec.p)))
        rows.append(
            {"N": n, "h": spec.T / n, "err_y": err_y, "err_y_ci": err_y_ci,
             "err_z": e2p, "err_z_ci": e2p_ci}
        )
    return rows


def _quadrature_rows(spec: StudySpec) -> list[dict]:
    drift = make_drift(**spec.drift)
    rows = []
    for k, n in enumerate(spec.n_sweep):
        e = quadrature_error(drift, n, spec.paths, p=spec.p, seed=spec.seed, x0=spec.x0)
        rows.append(
            {"N": n, "h": 1.0 / n, "err_y": e.m2, "err_y_ci": e.m2_ci,
             "err_z": e.m2p, "err_z_ci": e.m2p_ci}
        )
    return rows


def _btz_objects(spec: StudySpec):
    drift = make_drift(**spec.drift)
    gparams = dict(spec.driver)
    name = gparams.pop("name")
    trunc = gparams.pop("truncation", "default")
    g = make_driver(name, **gparams)
    tparams = dict(spec.terminal)
    phi = make_terminal(tparams.pop("kind"), **tparams)
    if trunc == "default" or trunc is None:
        n_level = default_truncation(phi, g.lam_y, spec.T)
    else:
        n_level = float(trunc)
    gn = truncate_driver(g, n_level)
    wparams = dict(spec.weights)
    rval = wparams.get("R")
    wspec = WeightSpec(kind=wparams.get("kind", "clamped-gaussian"),
                       R=None if rval in (None, "default") else float(rval))
    return drift, g, gn, phi, wspec


def _make_est(spec: StudySpec):
    params = dict(spec.condexp)
    backend = params.pop("backend", "lsmc")
    return make_estimator(backend, **params)


def _btz_point(spec: StudySpec, k: int) -> dict:
    """One sweep point: coarse scheme vs coupled finer run, same backend
    and basis (richer reference bases destabilize the tails; see ledger)."""
    n = spec.n_sweep[k]
    drift, g, gn, phi, wspec = _btz_objects(spec)
    seed_k = _point_seed(spec.seed, k)
    rr = spec.ref_ratio
    fine_p = make_uniform_partition(spec.T, n * rr)
    coarse_p = make_uniform_partition(spec.T, n)
    rmap = build_refinement(fine_p, coarse_p)
    fine_noise = sample_noise(fine_p, spec.paths, spec.d, GAUSSIAN, seed_k)
    coarse_noise = refine_couple(fine_noise, rmap)
    fine_fwd = euler_maruyama(spec.x0, drift, fine_noise)
    ref_sol = run_btz(fine_fwd, phi, gn, _make_est(spec), wspec, record_idx=rmap.bounds)
    ref_sol.forward = None
    del fine_fwd, fine_noise
    gc.collect()
    coarse_fwd = euler_maruyama(spec.x0, drift, coarse_noise)
    sol = run_btz(coarse_fwd, phi, gn, _make_est(spec), wspec)
    entry = btz_error(sol, ref_sol, rmap)
    return {
        "N": n,
        "h": spec.T / n,
        "err_y": entry.err_y,
        "err_y_ci": entry.err_y_ci,
        "err_z": entry.err_z,
        "err_z_ci": entry.err_z_ci,
        "y0": sol.y0,
        "y0_stat_ci": sol.diagnostics.get("y0_stat_ci", 0.0),
        "reference": entry.reference,
    }


def _available_oracle(spec: StudySpec, phi) -> Optional[OracleSolution]:
    if spec.drift.get("name") != "zero" or phi.kind != "terminal-only":
        return None
    name = spec.driver.get("name")
    if name == "q1":
        return oracle("cole-hopf", gamma=spec.driver.get("gamma", 1.0), terminal=phi,
                      T=spec.T, x0=spec.x0)
    if name == "q2":
        return oracle("linear", a=spec.driver.get("a", 0.5), c=spec.driver.get("c", 0.5),
                      terminal=phi, T=spec.T, x0=spec.x0)
    if name == "q4":
        return oracle("zero-driver", terminal=phi, T=spec.T, x0=spec.x0)
    return None


def _study_rows(spec: StudySpec) -> tuple[list[dict], dict]:
    meta: dict = {}
    if spec.scheme == "forward":
        rows = _forward_rows(spec)
        meta["reference"] = f"coupled-euler:{spec.ref_ratio}x"
    elif spec.scheme == "quadrature":
        rows = _quadrature_rows(spec)
        meta["reference"] = f"fine-riemann:{16}x"
    elif spec.scheme == "btz":
        points = range(len(spec.n_sweep))
        if spec.threads > 1:
            import multiprocessing as mp

            with mp.get_context("fork").Pool(spec.threads) as pool:
                rows = pool.starmap(_btz_point, [(spec, k) for k in points])
        else:
            rows = [_btz_point(spec, k) for k in points]
        meta["reference"] = rows[0]["reference"] if rows else ""
        _btz_oracle_meta(spec, rows, meta)
    else:
        raise ValueError("zvonkin studies are driven by the CLI, not run_study")
    return rows, meta


def _btz_oracle_meta(spec: StudySpec, rows: list, meta: dict) -> None:
    phi = _btz_objects(spec)[3]
    orc = _available_oracle(spec, phi)
    if orc is None:
        return
    meta["oracle_kind"] = orc.kind
    meta["oracle_y0"] = orc.y0
    last = rows[-1]
    meta["y0_last"] = last["y0"]
    meta["y0_gap"] = abs(last["y0"] - orc.y0)
    meta["y0_stat_ci"] = last["y0_stat_ci"]


def run_study(spec: StudySpec) -> ConvergenceReport:
    """Execute the sweep, fit the log-log rate on err_y, and write CSV
    artifacts; (spec, seed) -> byte-identical outputs."""
    t0 = time.time()
    rows, meta = _study_rows(spec)
    try:
        slope, intercept, stderr = fit_rate([(r["N"], r["err_y"]) for r in rows])
    except ValueError:
        slope, intercept, stderr = float("nan"), float("nan"), float("nan")
        meta["slope_note"] = "exact rows; no slope"
    meta.update({"config_hash": spec.config_hash, "seed": spec.seed,
                 "scheme": spec.scheme, "wall_time_s": time.time() - t0})
    report = ConvergenceReport(rows=rows, slope=slope, intercept=intercept,
                               stderr=stderr, meta=meta)
    if spec.out:
        report.write_csv(spec.out)
    return report
