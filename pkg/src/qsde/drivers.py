"""Quadratic driver abstraction with growth metadata, the truncated driver
family, and path-dependent terminal functionals with their discrete
approximations."""

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from qsde.grids import Partition, floor_index


@dataclass(frozen=True)
class DriverSpec:
    """Generator g(t, x, y, z) with growth constants.

    eval is vectorized across paths: x, z have shape (M, d), y has shape
    (M,), the result has shape (M,). Growth metadata:
    |g| <= lam0 + lam_y|y| + lam_z(|z| + 2*ell(|y|)|z|^2), spot-checked.
    """

    name: str
    eval: Callable
    lam0: float = 0.0
    lam_y: float = 0.0
    lam_z: float = 0.0
    lam_x: float = 0.0
    lam_t: float = 0.0
    alpha0: float = 0.5
    ell: Callable[[np.ndarray], np.ndarray] = field(default=lambda v: np.zeros_like(v))
    tag: str = "lipschitz-y"  # lipschitz-y | stochastic-lipschitz


def clamp_box(v: np.ndarray, n: float) -> np.ndarray:
    """The truncation map: identity on [-n, n], hard clamp outside.

    1-Lipschitz, |result| <= n; applied coordinatewise to vectors.
    """
    return np.clip(v, -n, n)


@dataclass(frozen=True)
class TruncatedDriver:
    """base evaluated at clamped arguments; equals base on the box
    {|y| <= n, |z|_inf <= n}."""

    base: DriverSpec
    n: float

    def __post_init__(self):
        if not self.n > 0:
            raise ValueError(f"truncation level must be positive, got {self.n}")

    @property
    def name(self) -> str:
        return f"{self.base.name}|n={self.n:g}"

    def eval(self, t, x, y, z):
        return self.base.eval(t, x, clamp_box(y, self.n), clamp_box(z, self.n))

    @property
    def lam0(self):
        return self.base.lam0

    @property
    def lam_y(self):
        return self.base.lam_y

    @property
    def lam_z(self):
        return self.base.lam_z


def truncate_driver(g: DriverSpec, n: float) -> TruncatedDriver:
    return TruncatedDriver(base=g, n=n)


def make_driver(name: str, **params) -> DriverSpec:
    """Shipped driver corpus.

    q1: (gamma/2)|z|^2          (Cole-Hopf solvable)
    q2: a*y + c*z               (linear, closed form)
    q3: sin(y)(1+|z|^a0) + min(|y|,1)|z|^2/(1+|z|)   (stochastic-Lipschitz)
    q4: 0
    """
    if name == "q1":
        gamma = float(params.get("gamma", 1.0))

        def eval_q1(t, x, y, z, g=gamma):
            z = np.atleast_2d(z)
            return 0.5 * g * (z**2).sum(axis=-1)

        return DriverSpec(
            "q1", eval_q1, lam0=0.0, lam_y=0.0, lam_z=0.5 * abs(gamma),
            ell=lambda v: np.full_like(np.asarray(v, dtype=float), 0.5),
            tag="lipschitz-y",
        )
    if name == "q2":
        a = float(params.get("a", 0.5))
        c = float(params.get("c", 0.5))

        def eval_q2(t, x, y, z, a=a, c=c):
            z = np.atleast_2d(z)
            return a * np.asarray(y) + c * z.sum(axis=-1)

        return DriverSpec("q2", eval_q2, lam0=0.0, lam_y=abs(a), lam_z=abs(c), tag="lipschitz-y")
    if name == "q3":
        alpha0 = float(params.get("alpha0", 0.5))

        def eval_q3(t, x, y, z, a0=alpha0):
            z = np.atleast_2d(z)
            zn = np.sqrt((z**2).sum(axis=-1))
            y = np.asarray(y)
            return np.sin(y) * (1.0 + zn**a0) + np.minimum(np.abs(y), 1.0) * zn**2 / (1.0 + zn)

        return DriverSpec(
            "q3", eval_q3, lam0=2.0, lam_y=1.0, lam_z=1.0, alpha0=alpha0,
            ell=lambda v: np.minimum(np.abs(v), 1.0), tag="stochastic-lipschitz",
        )
    if name == "q4":
        def eval_q4(t, x, y, z):
            return np.zeros(np.shape(np.atleast_2d(z))[0])

        return DriverSpec("q4", eval_q4, tag="lipschitz-y")
    raise ValueError(f"unknown driver {name!r}")


@dataclass(frozen=True)
class TerminalFunctional:
    """Bounded path functional with Lipschitz metadata.

    kinds: terminal-only (phi applied to X_T), lookback (sup |X_{t_i}|),
    asian (left-Riemann integral), discrete (phi at monitoring times),
    custom (callable on the whole discrete path). Values are clamped to
    [-bound, bound].
    """

    kind: str
    bound: float
    lipschitz_class: str = "Linf"  # Linf | L1
    lam: float = 1.0
    phi: Optional[Callable] = None
    monitor_times: Optional[tuple] = None
    node_constants: Optional[tuple] = None
    label: str = ""  # corpus tag, e.g. "clamp" (lets oracles specialize)
    param: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("terminal-only", "lookback", "asian", "discrete", "custom"):
            raise ValueError(f"unknown terminal kind {self.kind!r}")
        if not self.bound > 0:
            raise ValueError("terminal bound must be positive")

    @property
    def path_dependent(self) -> bool:
        return self.kind in ("lookback", "asian")

    @property
    def S(self) -> float:
        """Sum of per-node Lipschitz constants for the discrete kind."""
        if self.node_constants is None:
            return self.lam
        return float(sum(self.node_constants))


def make_terminal(kind: str, **params) -> TerminalFunctional:
    """Shipped terminals: lookback, asian, clamp(K), terminal callable."""
    if kind == "lookback":
        return TerminalFunctional(kind="lookback", bound=float(params.get("bound", 10.0)),
                                  lipschitz_class="Linf", lam=1.0)
    if kind == "asian":
        return TerminalFunctional(kind="asian", bound=float(params.get("bound", 10.0)),
                                  lipschitz_class="L1", lam=1.0)
    if kind == "clamp":
        K = float(params.get("K", 1.0))
        return TerminalFunctional(
            kind="terminal-only", bound=K, lipschitz_class="Linf", lam=1.0,
            phi=lambda x: np.clip(x, -K, K), label="clamp", param=K,
        )
    if kind == "terminal":
        phi = params["phi"]
        return TerminalFunctional(
            kind="terminal-only", bound=float(params.get("bound", 1.0)),
            lipschitz_class="Linf", lam=float(params.get("lam", 1.0)), phi=phi,
        )
    raise ValueError(f"unknown terminal kind {kind!r}")


def _monitor_indices(p: Partition, times: Sequence[float]) -> list[int]:
    """Nearest grid node at or before each monitoring time; s == grid node
    maps to that node (terminal time maps to N)."""
    idx = []
    for s in times:
        if s < 0.0 or s > p.T:
            raise ValueError(f"monitoring time {s} outside [0, {p.T}]")
        if s == p.T:
            idx.append(p.N)
        else:
            i = floor_index(p, s)
            idx.append(i)
    return idx


def eval_terminal(phi: TerminalFunctional, path: np.ndarray, p: Partition) -> np.ndarray:
    """Evaluate the functional on discrete paths (M, N+1, d); output (M,),
    clamped to [-bound, bound]."""
    path = np.asarray(path, dtype=float)
    if path.ndim == 2:
        path = path[:, :, None]
    if path.shape[1] != p.N + 1:
        raise ValueError("path length does not match the partition")
    if phi.kind == "terminal-only":
        x = path[:, -1, :]
        vals = phi.phi(x[:, 0] if x.shape[1] == 1 else x)
    elif phi.kind == "lookback":
        vals = np.sqrt((path**2).sum(axis=2)).max(axis=1)
    elif phi.kind == "asian":
        if path.shape[2] != 1:
            raise ValueError("asian terminal is defined for d = 1")
        vals = (path[:, :-1, 0] * p.delta).sum(axis=1)
    elif phi.kind == "discrete":
        idx = _monitor_indices(p, phi.monitor_times)
        vals = phi.phi(*(path[:, i, :] for i in idx))
    else:  # custom
        vals = phi.phi(path, p)
    return np.clip(np.asarray(vals, dtype=float), -phi.bound, phi.bound)


def discretize_functional(phi: TerminalFunctional, p: Partition) -> TerminalFunctional:
    """Discrete functional evaluated at grid points, per-node Lipschitz
    constants recorded (lookback: max decomposition with overall constant 1;
    asian: node i carries delta_i, so S = T)."""
    if phi.kind == "lookback":
        def dphi(*nodes):
            stacked = np.stack([np.sqrt((v**2).sum(axis=-1)) for v in nodes], axis=1)
            return stacked.max(axis=1)

        # max decomposition: locally 1-Lipschitz per node, recorded as lam = 1
        return TerminalFunctional(
            kind="discrete", bound=phi.bound, lipschitz_class="Linf", lam=1.0,
            phi=dphi, monitor_times=tuple(p.t),
        )
    if phi.kind == "asian":
        delta = p.delta

        def dphi(*nodes, w=delta):
            stacked = np.stack([v[..., 0] for v in nodes[:-1]], axis=1)
            return (stacked * w).sum(axis=1)

        return TerminalFunctional(
            kind="discrete", bound=phi.bound, lipschitz_class="L1", lam=1.0,
            phi=dphi, monitor_times=tuple(p.t), node_constants=tuple(list(delta) + [0.0]),
        )
    raise ValueError("discretize_functional accepts lookback or asian kinds")
