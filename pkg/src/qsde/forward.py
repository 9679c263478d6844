"""Drift specifications, Euler-Maruyama simulation with additive noise,
coupled strong-error estimation, and the quadrature-error process study."""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from qsde.errors import CouplingError, NumericalError
from qsde.grids import (
    GAUSSIAN,
    NoiseEnsemble,
    Partition,
    RefinementMap,
    make_uniform_partition,
    sample_noise_paths,
)


@dataclass(frozen=True)
class DriftSpec:
    """Bounded drift b(t, x) with regularity metadata.

    eval acts elementwise on the last (coordinate) axis and broadcasts over
    leading axes; gradient, when present, is the elementwise spatial
    derivative (coordinatewise drifts have diagonal Jacobians).
    """

    name: str
    eval: Callable[[float, np.ndarray], np.ndarray]
    bound: float
    regularity: str  # lipschitz | holder | dini | bounded-measurable | time-only | constant
    gradient: Optional[Callable[[float, np.ndarray], np.ndarray]] = None


def make_drift(name: str, **params) -> DriftSpec:
    """Shipped drift corpus, selected by name.

    zero, constant(c), time-only(amplitude), sin, tanh,
    holder(alpha in {0.25, 0.5}), step.
    """
    if name == "zero":
        return DriftSpec("zero", lambda t, x: np.zeros_like(x), 0.0, "constant",
                         gradient=lambda t, x: np.zeros_like(x))
    if name == "constant":
        c = float(params.get("c", 0.5))
        return DriftSpec("constant", lambda t, x: np.full_like(x, c), abs(c), "constant",
                         gradient=lambda t, x: np.zeros_like(x))
    if name == "time-only":
        a = float(params.get("amplitude", 1.0))
        return DriftSpec(
            "time-only",
            lambda t, x: a * np.cos(2.0 * np.pi * np.asarray(t)) * np.ones_like(x),
            abs(a),
            "time-only",
        )
    if name == "sin":
        return DriftSpec("sin", lambda t, x: np.sin(x), 1.0, "lipschitz",
                         gradient=lambda t, x: np.cos(x))
    if name == "tanh":
        return DriftSpec("tanh", lambda t, x: np.tanh(x), 1.0, "lipschitz",
                         gradient=lambda t, x: 1.0 / np.cosh(x) ** 2)
    if name == "holder":
        alpha = float(params.get("alpha", 0.5))
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"holder exponent must be in (0,1), got {alpha}")

        def holder_eval(t, x, a=alpha):
            return np.sign(x) * np.minimum(np.abs(x) ** a, 1.0)

        return DriftSpec("holder", holder_eval, 1.0, "holder")
    if name == "step":
        return DriftSpec("step", lambda t, x: np.where(x < 0.0, 1.0, -1.0), 1.0,
                         "bounded-measurable")
    raise ValueError(f"unknown drift {name!r}")


@dataclass(frozen=True)
class EulerSolution:
    """Discrete forward path X_i per path; X_{i+1} = X_i + b(t_i, X_i) dt_i + dW_i."""

    partition: Partition
    values: np.ndarray  # (M, N+1, d)
    drift: DriftSpec
    noise: NoiseEnsemble

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[2]


def euler_maruyama(x0, drift: DriftSpec, noise: NoiseEnsemble) -> EulerSolution:
    """Explicit Euler scheme driven by the stored increments."""
    p = noise.partition
    M, N, d = noise.increments.shape
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (d,))
    values = np.empty((M, N + 1, d))
    values[:, 0, :] = x0
    t = p.t
    delta = p.delta
    for i in range(N):
        b = drift.eval(t[i], values[:, i, :])
        if not np.all(np.isfinite(b)):
            raise NumericalError(f"drift {drift.name!r} returned non-finite values at step {i}")
        values[:, i + 1, :] = values[:, i, :] + b * delta[i] + noise.increments[:, i, :]
    return EulerSolution(partition=p, values=values, drift=drift, noise=noise)


def reconstruct_increments(sol: EulerSolution) -> np.ndarray:
    """Back out the noise increments from the stored values.

    Subtracting the drift term reverses the update only up to float64
    rounding; bitwise identity is checked by replaying single steps.
    """
    t = sol.partition.t
    delta = sol.partition.delta
    out = np.empty_like(sol.noise.increments)
    for i in range(sol.partition.N):
        b = sol.drift.eval(t[i], sol.values[:, i, :])
        out[:, i, :] = sol.values[:, i + 1, :] - sol.values[:, i, :] - b * delta[i]
    return out


@dataclass(frozen=True)
class StrongErrorEntry:
    N: int
    h: float
    err_l2: float
    err_l2_ci: float
    err_2p: float
    err_2p_ci: float
    p: int


def _moment_root_ci(sup_abs: np.ndarray, p: int) -> tuple[float, float]:
    """(E[s^{2p}])^{1/(2p)} and a 95% CI half-width on the root scale."""
    mom = sup_abs ** (2 * p)
    m = float(mom.mean())
    se = float(mom.std(ddof=1) / np.sqrt(mom.size)) if mom.size > 1 else 0.0
    root = m ** (1.0 / (2 * p)) if m > 0 else 0.0
    lo = max(m - 1.96 * se, 0.0) ** (1.0 / (2 * p))
    hi = (m + 1.96 * se) ** (1.0 / (2 * p))
    return root, 0.5 * (hi - lo)


def strong_error(
    coarse: EulerSolution, reference: EulerSolution, rmap: RefinementMap, p: int = 1
) -> StrongErrorEntry:
    """Monte Carlo estimate of E[sup_i |X_i - X^ref(t_i)|^{2p}]^{1/(2p)} over
    the coarse grid points, for a coupled (same-noise) reference."""
    if p < 1:
        raise ValueError("p must be >= 1")
    if coarse.noise.seed != reference.noise.seed or coarse.M != reference.M:
        raise CouplingError("strong_error requires coupled solutions (same seed and paths)")
    if coarse.noise.mode != reference.noise.mode:
        raise CouplingError("noise modes differ between scheme and reference")
    if not np.array_equal(coarse.partition.t, rmap.coarse.t) or not np.array_equal(
        reference.partition.t, rmap.fine.t
    ):
        raise CouplingError("solutions do not live on the map's grids")
    diff = coarse.values - reference.values[:, rmap.bounds, :]
    sup_abs = np.sqrt((diff**2).sum(axis=2)).max(axis=1)
    err2, ci2 = _moment_root_ci(sup_abs, 1)
    err2p, ci2p = _moment_root_ci(sup_abs, p)
    return StrongErrorEntry(
        N=coarse.partition.N,
        h=coarse.partition.h,
        err_l2=err2,
        err_l2_ci=ci2,
        err_2p=err2p,
        err_2p_ci=ci2p,
        p=p,
    )


@dataclass(frozen=True)
class QuadratureEntry:
    N: int
    m2: float
    m2_ci: float
    m2p: float
    m2p_ci: float
    p: int
    ratio: int


def quadrature_error(
    drift: DriftSpec,
    N: int,
    M: int,
    p: int = 1,
    seed: int = 0,
    ratio: int = 16,
    x0: float = 0.0,
) -> QuadratureEntry:
    """Moments of sup_{t<=1} |V_t^N|, V_t^N = int_0^t b(s, W_s) - b(s, W at
    the left grid time floor(Ns)/N) ds, by left-endpoint Riemann sums on a
    ratio-times finer grid (T = 1).

    Streams paths in chunks; deterministic in seed regardless of chunking.
    """
    if ratio < 16:
        raise ValueError("fine/coarse ratio must be >= 16")
    if not np.isfinite(drift.bound):
        raise ValueError("quadrature study requires a bounded drift")
    Nf = ratio * N
    fine = make_uniform_partition(1.0, Nf)
    df = 1.0 / Nf
    s_left = np.arange(Nf) * df
    anchor = (np.arange(Nf) // ratio) * ratio
    chunk = max(64, int(2**24 // max(Nf, 1)))
    sum2 = 0.0
    sum2sq = 0.0
    sum2p = 0.0
    sum2psq = 0.0
    for m0 in range(0, M, chunk):
        m1 = min(m0 + chunk, M)
        inc = sample_noise_paths(fine, m0, m1, 1, GAUSSIAN, seed)[:, :, 0]
        W = np.empty((m1 - m0, Nf + 1))
        W[:, 0] = x0
        np.cumsum(inc, axis=1, out=W[:, 1:])
        W[:, 1:] += x0
        integrand = drift.eval(s_left, W[:, :-1]) - drift.eval(s_left, W[:, anchor])
        V = np.cumsum(integrand, axis=1) * df
        sup_abs = np.abs(V).max(axis=1)
        m2v = sup_abs**2
        m2pv = sup_abs ** (2 * p)
        sum2 += m2v.sum()
        sum2sq += (m2v**2).sum()
        sum2p += m2pv.sum()
        sum2psq += (m2pv**2).sum()
    mean2 = sum2 / M
    mean2p = sum2p / M
    se2 = np.sqrt(max(sum2sq / M - mean2**2, 0.0) / M)
    se2p = np.sqrt(max(sum2psq / M - mean2p**2, 0.0) / M)
    return QuadratureEntry(
        N=N, m2=mean2, m2_ci=1.96 * se2, m2p=mean2p, m2p_ci=1.96 * se2p, p=p, ratio=ratio
    )
