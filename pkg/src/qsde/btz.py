"""The explicit backward induction scheme with truncated drivers and clamped
weights, its centered generalization, scheme-level property checks, the
Malliavin-weight control estimator, and closed-form oracles."""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import norm

from qsde.condexp import ExactTreeEstimator
from qsde.drivers import DriverSpec, TerminalFunctional, TruncatedDriver, eval_terminal
from qsde.errors import NumericalError
from qsde.forward import EulerSolution
from qsde.grids import GAUSSIAN, RADEMACHER, NoiseEnsemble, Partition

GH_ORDER = 160


def default_clamp_level(N: int) -> float:
    """Weight clamp level R(N) = 2 sqrt(ln N) (R >= 1 for tiny N)."""
    return max(2.0 * np.sqrt(np.log(max(N, 2))), 1.0)


def default_truncation(phi: TerminalFunctional, lam_y: float, T: float) -> float:
    """Driver truncation level that the uniform bound keeps inactive."""
    return max(2.0 * phi.bound * np.exp(1.0 + lam_y * T), 10.0)


@dataclass(frozen=True)
class WeightSpec:
    """Weight family used to extract the control component.

    clamped-gaussian: H_i = clamp(dW_i/dt_i, +-R/sqrt(dt_i)) per coordinate;
    rademacher-native: H_i = dW_i/dt_i (already bounded, c_i = 1).
    R = None defers to the R(N) = 2 sqrt(ln N) default.
    """

    kind: str = "clamped-gaussian"
    R: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("clamped-gaussian", "rademacher-native"):
            raise ValueError(f"unknown weight kind {self.kind!r}")
        if self.R is not None and not self.R > 0:
            raise ValueError("clamp level R must be positive")


def clamped_second_moment(R: float) -> float:
    """E[clamp(G, +-R)^2] for standard normal G (closed form)."""
    return (2.0 * norm.cdf(R) - 1.0) - 2.0 * R * norm.pdf(R) + 2.0 * R**2 * norm.sf(R)


class WeightSet:
    """Per-step weight vectors, computed lazily from the noise increments."""

    def __init__(self, spec: WeightSpec, noise: NoiseEnsemble):
        if spec.kind == "clamped-gaussian" and noise.mode != GAUSSIAN:
            raise ValueError("clamped-gaussian weights require gaussian noise")
        if spec.kind == "rademacher-native" and noise.mode != RADEMACHER:
            raise ValueError("rademacher-native weights require rademacher noise")
        self.spec = spec
        self.noise = noise
        self.R = spec.R if spec.R is not None else default_clamp_level(noise.partition.N)
        delta = noise.partition.delta
        if spec.kind == "clamped-gaussian":
            self.c = np.full(delta.size, clamped_second_moment(self.R))
        else:
            self.c = np.ones(delta.size)

    def at(self, i: int) -> np.ndarray:
        """Weights H_i for step i, shape (M, d)."""
        delta = self.noise.partition.delta[i]
        raw = self.noise.increments[:, i, :] / delta
        if self.spec.kind == "rademacher-native":
            return raw
        bound = self.R / np.sqrt(delta)
        return np.clip(raw, -bound, bound)

    @property
    def values(self) -> np.ndarray:
        """Materialized (M, N, d) array; prefer at(i) for large ensembles."""
        return np.stack([self.at(i) for i in range(self.noise.partition.N)], axis=1)


def make_weights(spec: WeightSpec, noise: NoiseEnsemble) -> WeightSet:
    return WeightSet(spec, noise)


@dataclass
class BtzSolution:
    """Backward-scheme output: per-path Y_i (scalar) and Z_i (R^d) at the
    recorded grid indices (always including 0 and N)."""

    partition: Partition
    record_idx: np.ndarray
    y: np.ndarray  # (M, R)
    z: np.ndarray  # (M, R, d)
    terminal: TerminalFunctional
    driver: object
    estimator_name: str
    weight_spec: WeightSpec
    forward: Optional[EulerSolution] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.y.shape[0]

    def index_of(self, i: int) -> int:
        pos = np.searchsorted(self.record_idx, i)
        if pos >= self.record_idx.size or self.record_idx[pos] != i:
            raise KeyError(f"grid index {i} was not recorded")
        return int(pos)

    @property
    def y0(self) -> float:
        return float(self.y[:, 0].mean())

    @property
    def z0(self) -> np.ndarray:
        return self.z[:, 0, :].mean(axis=0)


def _running_statistic(phi: TerminalFunctional, forward: EulerSolution) -> Optional[np.ndarray]:
    """State augmentation restoring Markovianity for path-dependent
    terminals: running max of |X| for lookback, running left-Riemann
    integral for asian."""
    if phi.kind == "lookback":
        normx = np.sqrt((forward.values**2).sum(axis=2))
        return np.maximum.accumulate(normx, axis=1)
    if phi.kind == "asian":
        x = forward.values[:, :-1, 0] * forward.partition.delta
        out = np.zeros((forward.M, forward.partition.N + 1))
        np.cumsum(x, axis=1, out=out[:, 1:])
        return out
    return None


def run_btz(
    forward: EulerSolution,
    phi: TerminalFunctional,
    g,
    est,
    wspec: WeightSpec | None = None,
    record_idx=None,
) -> BtzSolution:
    """Explicit backward recursion.

    Y_N = Phi(X), Z_N = 0; then for i = N-1..0 with one conditional
    expectation CE = E[Y_{i+1} | F_i] reused in both places:
        Z_i = E[Y_{i+1} H_i | F_i]
        Y_i = CE + g(t_i, X_i, CE, Z_i) dt_i
    The estimator is called exactly twice per step (plain and weighted).
    """
    p = forward.partition
    N, M, d = p.N, forward.M, forward.d
    wspec = wspec or WeightSpec(
        kind="rademacher-native" if forward.noise.mode == RADEMACHER else "clamped-gaussian"
    )
    weights = WeightSet(wspec, forward.noise)
    if record_idx is None:
        record_idx = np.arange(N + 1)
    record_idx = np.unique(np.asarray(record_idx, dtype=np.int64))
    if record_idx[0] != 0 or record_idx[-1] != N:
        raise ValueError("record_idx must include 0 and N")
    pos = {int(i): j for j, i in enumerate(record_idx)}

    aug = _running_statistic(phi, forward)
    y = np.empty((M, record_idx.size))
    z = np.zeros((M, record_idx.size, d))
    Y = eval_terminal(phi, forward.values, p)
    if N in pos:
        y[:, pos[N]] = Y
    delta = p.delta
    t = p.t
    for i in range(N - 1, -1, -1):
        X = forward.values[:, i, :]
        reg = X if aug is None else np.column_stack([X, aug[:, i]])
        CE = est.condexp(i, reg, Y)
        # centered target: E[(Y - CE) H | F] = E[Y H | F] since E[H|F] = 0,
        # but the regression variance drops to the one-step innovation scale
        Z = est.weighted(i, reg, Y - CE, weights.at(i))
        Y = CE + g.eval(t[i], X, CE, Z) * delta[i]
        if not np.all(np.isfinite(Y)):
            raise NumericalError(f"backward recursion produced non-finite Y at step {i}")
        if i in pos:
            y[:, pos[i]] = Y
            z[:, pos[i], :] = Z

    diagnostics = {
        "y0_mean": float(Y.mean()),
        "y0_ci": float(1.96 * Y.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0,
        "z0_mean": z[:, 0, :].mean(axis=0),
        "z0_ci": 1.96 * z[:, 0, :].std(axis=0, ddof=1) / np.sqrt(M) if M > 1 else np.zeros(d),
        "R": weights.R,
        "c": weights.c,
    }
    # statistical half-width of the step-0 estimates, from the inputs they average
    Y1 = y[:, 1] if 1 in pos else None
    if Y1 is not None:
        diagnostics["y0_stat_ci"] = float(1.96 * Y1.std(ddof=1) / np.sqrt(M))
        H0 = weights.at(0)
        diagnostics["z0_stat_ci"] = 1.96 * (Y1[:, None] * H0).std(axis=0, ddof=1) / np.sqrt(M)
    return BtzSolution(
        partition=p,
        record_idx=record_idx,
        y=y,
        z=z,
        terminal=phi,
        driver=g,
        estimator_name=getattr(est, "name", type(est).__name__),
        weight_spec=wspec,
        forward=forward,
        diagnostics=diagnostics,
    )


@dataclass
class CenteredSolution:
    """Output of the centered scheme with general centered weights."""

    partition: Partition
    y: np.ndarray  # (M, N+1)
    z: np.ndarray  # (M, N+1, d)
    c: np.ndarray  # (N,)
    h_values: np.ndarray  # (M, N, d)
    driver: Callable
    estimator: object
    regressors: Optional[Callable]


def run_centered(
    partition: Partition,
    xi: np.ndarray,
    G: Callable,
    est,
    H: np.ndarray,
    c: np.ndarray,
    regressors: Optional[Callable] = None,
    c_bounds: tuple[float, float] = (1e-8, 1e8),
) -> CenteredSolution:
    """Centered scheme with caller-supplied weights H_i satisfying
    E[H_i|F_i] = 0 and E[H_i H_i^T|F_i] = (c_i/dt_i) I.

    G(i, ybar, z) -> (M,) may be path-dependent (F_{t_i}-measurable).
    regressors(i) -> (M, r) feeds non-tree estimators; the exact tree
    ignores it.
    """
    N = partition.N
    H = np.asarray(H, dtype=float)
    if H.ndim != 3 or H.shape[1] != N:
        raise ValueError("weights must have shape (M, N, d)")
    M, _, d = H.shape
    c = np.asarray(c, dtype=float)
    if np.any(c <= c_bounds[0]) or np.any(c >= c_bounds[1]):
        raise ValueError("weight second-moment scale outside configured bounds")
    xi = np.asarray(xi, dtype=float)
    y = np.empty((M, N + 1))
    z = np.zeros((M, N + 1, d))
    y[:, N] = xi
    delta = partition.delta
    for i in range(N - 1, -1, -1):
        reg = None if regressors is None else regressors(i)
        CE = est.condexp(i, reg, y[:, i + 1])
        Zi = est.weighted(i, reg, y[:, i + 1], H[:, i, :])
        y[:, i] = CE + G(i, CE, Zi) * delta[i]
        z[:, i, :] = Zi
        if not np.all(np.isfinite(y[:, i])):
            raise NumericalError(f"centered recursion produced non-finite Y at step {i}")
    return CenteredSolution(
        partition=partition, y=y, z=z, c=c, h_values=H, driver=G, estimator=est,
        regressors=regressors,
    )


def centering_residuals(sol: CenteredSolution) -> dict:
    """Reconstruct nu_i = Y_{i+1} + dt G_i - (dt/c_i) Z_i . H_i - Y_i and
    evaluate the centering identities E[nu_i|F_i] and E[nu_i H_i|F_i]."""
    N = sol.partition.N
    delta = sol.partition.delta
    est = sol.estimator
    max_plain = 0.0
    max_weighted = 0.0
    for i in range(N):
        reg = None if sol.regressors is None else sol.regressors(i)
        CE = est.condexp(i, reg, sol.y[:, i + 1])
        gi = sol.driver(i, CE, sol.z[:, i, :])
        nu = (
            sol.y[:, i + 1]
            + delta[i] * gi
            - (delta[i] / sol.c[i]) * (sol.z[:, i, :] * sol.h_values[:, i, :]).sum(axis=1)
            - sol.y[:, i]
        )
        plain = est.condexp(i, reg, nu)
        weighted = est.weighted(i, reg, nu, sol.h_values[:, i, :])
        max_plain = max(max_plain, float(np.abs(plain).max()))
        max_weighted = max(max_weighted, float(np.abs(weighted).max()))
    return {"max_plain": max_plain, "max_weighted": max_weighted}


@dataclass(frozen=True)
class BoundCheck:
    ok: bool
    max_abs: float
    bound: float
    margin: float


def check_uniform_bound(sol, lam0: float, lam_y: float) -> BoundCheck:
    """|Y_i| <= (||xi||_inf + lam0 T) exp(1 + lam_y T) at every recorded
    step and path; the terminal sup is read off the recorded terminal
    values (exact on the enumerated tree)."""
    T = sol.partition.T
    xi_inf = float(np.abs(sol.y[:, -1]).max())
    bound = (xi_inf + lam0 * T) * np.exp(1.0 + lam_y * T)
    max_abs = float(np.abs(sol.y).max())
    return BoundCheck(ok=max_abs <= bound, max_abs=max_abs, bound=bound, margin=bound - max_abs)


def check_discrete_bmo(sol: BtzSolution, est=None) -> dict:
    """Per-i statistic max over paths of E[sum_{j>=i} dt_j |Z_j|^2 | F_i].

    Requires the full Z history (record_idx = all grid nodes)."""
    p = sol.partition
    if sol.record_idx.size != p.N + 1:
        raise ValueError("discrete BMO check needs the full Z history")
    est = est if est is not None else _tree_or_error(sol)
    delta = p.delta
    zsq = (sol.z[:, :-1, :] ** 2).sum(axis=2) * delta
    tail = np.cumsum(zsq[:, ::-1], axis=1)[:, ::-1]
    stats = np.empty(p.N)
    for i in range(p.N):
        if sol.forward is not None:
            reg = sol.forward.values[:, i, :]
        else:
            reg = None
        cond = est.condexp(i, reg, tail[:, i])
        stats[i] = float(cond.max())
    return {"per_step": stats, "max": float(stats.max())}


def _tree_or_error(sol: BtzSolution):
    if sol.estimator_name == "exact-tree":
        return ExactTreeEstimator()
    raise ValueError("pass the estimator used for conditional evaluation")


def malliavin_z(
    forward: EulerSolution,
    phi: TerminalFunctional,
    g,
    t: float = 0.0,
    y_path: Optional[np.ndarray] = None,
    z_path: Optional[np.ndarray] = None,
) -> tuple[float, float]:
    """Derivative-free estimate of Z_t from the weight representation
    Z_t = E[phi(X) N^t_{T*} + int_t^{T*..T} g(v, X_v, Y_v, Z_v) N^t_{v ^ T*} dv],
    N^t_v = M^t_v / ((v - t) grad X_t), M^t_v = sum of grad X dW over (t, v].

    The first-variation recursion grad X_{i+1} = (1 + b'(t_i, X_i) dt_i)
    grad X_i needs a declared drift gradient; d = 1 only. For nonzero
    drivers the integral needs (Y, Z) along the paths; pass the arrays from
    a scheme run (full grid history).
    """
    if forward.d != 1:
        raise ValueError("malliavin_z is implemented for d = 1")
    if forward.drift.gradient is None:
        raise ValueError("malliavin_z requires a drift with a declared gradient")
    if phi.kind not in ("terminal-only", "discrete"):
        raise ValueError("malliavin_z supports terminal-only or discrete terminals")
    p = forward.partition
    N, M = p.N, forward.M
    tgrid = p.t
    it = int(np.searchsorted(tgrid, t))
    if tgrid[it] != t:
        raise ValueError("t must be a grid time")

    if phi.kind == "terminal-only":
        t_star = p.T
    else:
        later = [s for s in phi.monitor_times if s > t]
        if not later:
            raise ValueError("t must lie strictly before the next monitoring date")
        t_star = min(later)
    i_star = int(np.searchsorted(tgrid, t_star))
    if tgrid[i_star] != t_star:
        raise ValueError("monitoring dates must be grid times")
    if i_star <= it:
        raise ValueError("t must lie strictly before the next monitoring date")

    X = forward.values[:, :, 0]
    grad = np.empty((M, N + 1))
    grad[:, 0] = 1.0
    for i in range(N):
        gb = forward.drift.gradient(tgrid[i], X[:, i])
        grad[:, i + 1] = (1.0 + gb * p.delta[i]) * grad[:, i]
    if np.any(grad[:, it] == 0.0):
        raise NumericalError("singular first variation at the conditioning time")

    dW = forward.noise.increments[:, :, 0]
    Mv = np.zeros((M, N + 1))
    np.cumsum(grad[:, it:N] * dW[:, it:N], axis=1, out=Mv[:, it + 1 :])

    def weight_at(iv: int) -> np.ndarray:
        iv_eff = min(iv, i_star)
        return Mv[:, iv_eff] / ((tgrid[iv_eff] - t) * grad[:, it])

    xi = eval_terminal(phi, forward.values, p)
    contrib = xi * weight_at(i_star)
    if y_path is not None or not _is_zero_driver(g):
        if y_path is None or z_path is None:
            raise ValueError("nonzero drivers need y_path and z_path along the grid")
        for j in range(it, N):
            # left-Riemann; the v = t node has no weight, use the next node
            jn = max(j, it + 1)
            gval = g.eval(tgrid[j], forward.values[:, j, :], y_path[:, j], z_path[:, j, :])
            contrib = contrib + gval * weight_at(jn) * p.delta[j]
    est = float(contrib.mean())
    ci = float(1.96 * contrib.std(ddof=1) / np.sqrt(M))
    return est, ci


def _is_zero_driver(g) -> bool:
    name = getattr(g, "name", "")
    return name == "q4" or name.startswith("q4|")


@dataclass(frozen=True)
class OracleSolution:
    """Ground-truth values for b = 0 instances; y_at/z_at evaluate the
    closed-form value function pathwise when available."""

    kind: str
    y0: float
    meta: dict
    y_at: Optional[Callable] = None
    z_at: Optional[Callable] = None


def _gh_nodes(order: int = GH_ORDER):
    xg, wg = np.polynomial.hermite_e.hermegauss(order)
    return xg, wg / np.sqrt(2.0 * np.pi)


def _clamp_exp_moments(gamma: float, K: float, m, s: float):
    """E[exp(gamma clamp(m + s G, +-K))] and its m-derivative, exactly."""
    m = np.asarray(m, dtype=float)
    if s == 0.0:
        e = np.exp(gamma * np.clip(m, -K, K))
        return e, gamma * e * (np.abs(m) < K)
    a = (-K - m) / s
    b = (K - m) / s
    lo = np.exp(-gamma * K) * norm.cdf(a)
    hi = np.exp(gamma * K) * norm.sf(b)
    mid = np.exp(gamma * m + 0.5 * gamma**2 * s**2) * (norm.cdf(b - gamma * s) - norm.cdf(a - gamma * s))
    val = lo + mid + hi
    # d/dm: the boundary terms cancel against the mid-piece edge terms
    dmid = gamma * mid + np.exp(gamma * m + 0.5 * gamma**2 * s**2) * (
        -norm.pdf(b - gamma * s) + norm.pdf(a - gamma * s)
    ) / s
    dlo = np.exp(-gamma * K) * (-norm.pdf(a) / s)
    dhi = np.exp(gamma * K) * (norm.pdf(b) / s)
    return val, dlo + dmid + dhi


def oracle(kind: str, **params) -> OracleSolution:
    """Ground-truth generators (b = 0 forward models).

    zero-driver: Y_t = E[xi | F_t]; linear: g = a y + c z with
    Y_0 = e^{aT} E[xi under the c-shifted measure]; cole-hopf:
    g = (gamma/2)|z|^2 with Y_0 = (1/gamma) ln E[e^{gamma xi}].
    Terminal-only functionals use quadrature (exact Gaussian pieces for the
    clamp terminal, whose kink defeats plain Gauss-Hermite).
    """
    phi: TerminalFunctional = params["terminal"]
    T = float(params.get("T", 1.0))
    x0 = float(params.get("x0", 0.0))
    if kind == "zero-driver":
        if phi.kind == "terminal-only":
            y_at, z_at = _terminal_value_functions(phi, T, gamma=None, a=0.0, c=0.0)
            return OracleSolution(
                kind=kind, y0=float(y_at(0.0, np.array([x0]))[0]),
                meta={"method": "quadrature", "order": GH_ORDER}, y_at=y_at, z_at=z_at,
            )
        # path-dependent: plain Monte Carlo ground truth for Y_0
        M = int(params.get("M", 400_000))
        seed = int(params.get("seed", 2024))
        N = int(params.get("N", 512))
        from qsde.forward import euler_maruyama, make_drift
        from qsde.grids import make_uniform_partition, sample_noise

        p = make_uniform_partition(T, N)
        noise = sample_noise(p, M, 1, GAUSSIAN, seed)
        sol = euler_maruyama(x0, make_drift("zero"), noise)
        vals = eval_terminal(phi, sol.values, p)
        return OracleSolution(
            kind=kind, y0=float(vals.mean()),
            meta={"method": "mc", "M": M, "N": N, "seed": seed,
                  "ci": float(1.96 * vals.std() / np.sqrt(M))},
        )
    if kind == "linear":
        a = float(params.get("a", 0.5))
        c = float(params.get("c", 0.5))
        if phi.kind != "terminal-only":
            raise ValueError("linear oracle supports terminal-only functionals")
        y_at, z_at = _terminal_value_functions(phi, T, gamma=None, a=a, c=c)
        return OracleSolution(
            kind=kind, y0=float(y_at(0.0, np.array([x0]))[0]),
            meta={"method": "quadrature", "order": GH_ORDER, "a": a, "c": c},
            y_at=y_at, z_at=z_at,
        )
    if kind == "cole-hopf":
        gamma = float(params.get("gamma", 1.0))
        if gamma == 0.0:
            raise ValueError("cole-hopf oracle needs gamma != 0")
        if phi.kind != "terminal-only":
            raise ValueError("cole-hopf oracle supports terminal-only functionals")
        y_at, z_at = _terminal_value_functions(phi, T, gamma=gamma, a=0.0, c=0.0)
        return OracleSolution(
            kind=kind, y0=float(y_at(0.0, np.array([x0]))[0]),
            meta={"method": "exact-pieces" if phi.label == "clamp" else "quadrature",
                  "order": GH_ORDER, "gamma": gamma},
            y_at=y_at, z_at=z_at,
        )
    raise ValueError(f"unknown oracle kind {kind!r}")


def _terminal_value_functions(phi: TerminalFunctional, T: float, gamma, a: float, c: float):
    """(y_at, z_at) for terminal-only xi = phi(X_T), b = 0.

    gamma = None: linear driver a y + c z (a = c = 0 gives the zero
    driver); otherwise the quadratic Cole-Hopf transform.
    """
    is_clamp = phi.label == "clamp"
    K = phi.param if is_clamp else None
    xg, wg = _gh_nodes()

    def y_at(t, x):
        x = np.asarray(x, dtype=float)
        s = np.sqrt(max(T - t, 0.0))
        if gamma is not None:
            if is_clamp:
                val, _ = _clamp_exp_moments(gamma, K, x, s)
                return np.log(val) / gamma
            if s == 0.0:
                return np.clip(phi.phi(x), -phi.bound, phi.bound)
            samp = np.clip(phi.phi(x[..., None] + s * xg), -phi.bound, phi.bound)
            return np.log(np.exp(gamma * samp) @ wg) / gamma
        shift = c * (T - t)
        if s == 0.0:
            base = np.clip(phi.phi(x + shift), -phi.bound, phi.bound)
        else:
            samp = np.clip(phi.phi(x[..., None] + shift + s * xg), -phi.bound, phi.bound)
            base = samp @ wg
        return np.exp(a * (T - t)) * base

    def z_at(t, x):
        x = np.asarray(x, dtype=float)
        s = np.sqrt(max(T - t, 0.0))
        if gamma is not None and is_clamp:
            val, dval = _clamp_exp_moments(gamma, K, x, s)
            return dval / (gamma * val)
        # spatial derivative by a small centered difference
        eps = 1e-5 * max(1.0, np.sqrt(T))
        return (y_at(t, x + eps) - y_at(t, x - eps)) / (2.0 * eps)

    return y_at, z_at
