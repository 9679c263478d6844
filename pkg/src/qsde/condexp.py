"""Pluggable conditional-expectation backends for the backward scheme:
least-squares regression, nearest-neighbor nested averaging, and an exact
tree for enumerated Rademacher noise."""

from dataclasses import dataclass
from itertools import product

import numpy as np


@dataclass(frozen=True)
class BasisSpec:
    """Regression basis: total-degree polynomials or piecewise-constant bins,
    with per-step affine standardization of each regressor column."""

    family: str = "poly"  # poly | bins
    degree: int = 3
    n_bins: int = 16
    standardize: bool = True

    def __post_init__(self):
        if self.family not in ("poly", "bins"):
            raise ValueError(f"unknown basis family {self.family!r}")
        if self.family == "poly" and self.degree < 0:
            raise ValueError("polynomial degree must be >= 0")
        if self.family == "bins" and self.n_bins < 1:
            raise ValueError("bin count must be >= 1")


def _standardize(X: np.ndarray) -> np.ndarray:
    """Rescale each column to empirical mean 0, variance 1; constant columns
    are zeroed (their information is carried by the intercept)."""
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    out = np.zeros_like(X)
    live = sd > 1e-300
    out[:, live] = (X[:, live] - mu[live]) / sd[live]
    return out


def build_design(basis: BasisSpec, X: np.ndarray) -> np.ndarray:
    """Design matrix for regressors X of shape (M, r)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.ndim != 2:
        raise ValueError("regressors must have shape (M, r)")
    M, r = X.shape
    Xs = _standardize(X) if basis.standardize else X
    if basis.family == "poly":
        live = [j for j in range(r) if np.any(Xs[:, j] != 0.0)]
        cols = [np.ones(M)]
        for exps in product(*(range(basis.degree + 1) for _ in live)):
            total = sum(exps)
            if total == 0 or total > basis.degree:
                continue
            col = np.ones(M)
            for j, e in zip(live, exps):
                if e:
                    col = col * Xs[:, j] ** e
            cols.append(col)
        return np.column_stack(cols)
    # piecewise-constant bins on the first regressor column
    x = Xs[:, 0]
    if np.all(x == 0.0):
        return np.ones((M, 1))
    qs = np.quantile(x, np.linspace(0.0, 1.0, basis.n_bins + 1)[1:-1])
    idx = np.searchsorted(qs, x, side="right")
    A = np.zeros((M, basis.n_bins))
    A[np.arange(M), idx] = 1.0
    keep = A.any(axis=0)
    return A[:, keep]


class LsmcEstimator:
    """Ordinary least squares projection onto the span of the basis.

    Rank deficiency falls back to the SVD pseudo-inverse (reported in the
    per-call diagnostics)."""

    name = "lsmc"

    def __init__(self, basis: BasisSpec | None = None):
        self.basis = basis or BasisSpec()
        self.diagnostics: list[dict] = []

    def condexp(self, step: int, X: np.ndarray, V: np.ndarray) -> np.ndarray:
        A = build_design(self.basis, X)
        coef, _, rank, sv = np.linalg.lstsq(A, V, rcond=None)
        cond = float(sv[0] / sv[-1]) if sv.size and sv[-1] > 0 else np.inf
        self.diagnostics.append(
            {"step": step, "cond": cond, "rank": int(rank), "k": A.shape[1],
             "rank_deficient": int(rank) < A.shape[1]}
        )
        return A @ coef

    def weighted(self, step: int, X: np.ndarray, V: np.ndarray, H: np.ndarray) -> np.ndarray:
        H = np.atleast_2d(H)
        A = build_design(self.basis, X)
        coef, _, rank, sv = np.linalg.lstsq(A, V[:, None] * H, rcond=None)
        cond = float(sv[0] / sv[-1]) if sv.size and sv[-1] > 0 else np.inf
        self.diagnostics.append(
            {"step": step, "cond": cond, "rank": int(rank), "k": A.shape[1],
             "rank_deficient": int(rank) < A.shape[1]}
        )
        return A @ coef


class NestedEstimator:
    """Per-path inner average over the m_inner nearest regressor values
    (rank window on the first regressor column); deterministic.

    The per-step diagnostic records the mean inner CI half-width."""

    name = "nested"

    def __init__(self, m_inner: int):
        if m_inner < 1:
            raise ValueError("nested estimator needs m_inner >= 1")
        self.m_inner = int(m_inner)
        self.diagnostics: list[dict] = []

    def _window_mean(self, x: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, float]:
        M = x.size
        k = min(self.m_inner, M)
        order = np.argsort(x, kind="stable")
        Vs = V[order]
        csum = np.concatenate([[0.0], np.cumsum(Vs)])
        csq = np.concatenate([[0.0], np.cumsum(Vs**2)])
        pos = np.empty(M, dtype=np.int64)
        pos[order] = np.arange(M)
        lo = np.clip(pos - (k - 1) // 2, 0, M - k)
        hi = lo + k
        means = (csum[hi] - csum[lo]) / k
        var = np.maximum((csq[hi] - csq[lo]) / k - means**2, 0.0)
        ci = float(np.mean(1.96 * np.sqrt(var / k)))
        out = np.empty(M)
        out[order] = means
        return out, ci

    def condexp(self, step: int, X: np.ndarray, V: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(X, dtype=float))[:, 0]
        vals, ci = self._window_mean(x, np.asarray(V, dtype=float))
        self.diagnostics.append({"step": step, "inner_ci": ci})
        return vals

    def weighted(self, step: int, X: np.ndarray, V: np.ndarray, H: np.ndarray) -> np.ndarray:
        H = np.atleast_2d(H)
        x = np.atleast_2d(np.asarray(X, dtype=float))[:, 0]
        out = np.empty((x.size, H.shape[1]))
        for kcol in range(H.shape[1]):
            out[:, kcol], _ = self._window_mean(x, V * H[:, kcol])
        return out


class ExactTreeEstimator:
    """Exact conditional expectation on the enumerated Rademacher tree.

    Path m takes sign +1 at step i iff bit i of m is set (the layout of
    grids.enumerate_rademacher); conditioning on F_{t_i} fixes bits < i.
    Averages fold one step bit at a time, so the tower property holds
    bitwise."""

    name = "exact-tree"

    def __init__(self):
        self.diagnostics: list[dict] = []

    @staticmethod
    def _depth(M: int) -> int:
        N = M.bit_length() - 1
        if 2**N != M:
            raise ValueError("exact tree needs 2^N enumerated paths")
        return N

    def condexp(self, step: int, X, V: np.ndarray) -> np.ndarray:
        V = np.asarray(V, dtype=float)
        N = self._depth(V.shape[0])
        if not 0 <= step <= N:
            raise ValueError(f"step {step} outside tree depth {N}")
        W = V
        for b in range(N - 1, step - 1, -1):
            W = W.reshape(-1, 2, 2**b)
            W = np.broadcast_to(W.mean(axis=1, keepdims=True), W.shape).reshape(-1)
        return W.copy() if W is V else W

    def weighted(self, step: int, X, V: np.ndarray, H: np.ndarray) -> np.ndarray:
        H = np.atleast_2d(H)
        out = np.empty((V.shape[0], H.shape[1]))
        for kcol in range(H.shape[1]):
            out[:, kcol] = self.condexp(step, X, V * H[:, kcol])
        return out


def make_estimator(name: str, **params):
    if name == "lsmc":
        basis = BasisSpec(
            family=params.get("family", "poly"),
            degree=int(params.get("degree", 3)),
            n_bins=int(params.get("n_bins", 16)),
            standardize=bool(params.get("standardize", True)),
        )
        return LsmcEstimator(basis)
    if name == "nested":
        if "m_inner" not in params or int(params["m_inner"]) == 0:
            raise ValueError("nested estimator requires m_inner >= 1")
        return NestedEstimator(int(params["m_inner"]))
    if name == "exact-tree":
        return ExactTreeEstimator()
    raise ValueError(f"unknown estimator backend {name!r}")


def fit_condexp(est, X, V, step: int = 0) -> np.ndarray:
    """Evaluated conditional-expectation estimate of V given the regressor."""
    return est.condexp(step, X, np.asarray(V, dtype=float))


def weighted_condexp(est, X, V, H, step: int = 0) -> np.ndarray:
    """Componentwise estimate of E[V * H_k | regressor], vector-valued."""
    return est.weighted(step, X, np.asarray(V, dtype=float), np.asarray(H, dtype=float))
