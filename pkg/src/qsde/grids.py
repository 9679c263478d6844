"""Time partitions, reproducible noise ensembles, and coarse/fine coupling.

Noise is generated from counter-based per-path substreams (Philox keyed by
(seed, path)), so the ensemble is a pure function of (seed, partition, M, d,
mode) no matter how generation is scheduled across workers.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from qsde.errors import CouplingError

GAUSSIAN = "gaussian"
RADEMACHER = "rademacher"


@dataclass(frozen=True)
class Partition:
    """Ordered time grid 0 = t_0 < ... < t_N = T."""

    t: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        object.__setattr__(self, "t", t)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("partition needs at least two time points")
        if t[0] != 0.0:
            raise ValueError("partition must start at 0")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("partition times must be strictly increasing")
        t.setflags(write=False)

    @property
    def N(self) -> int:
        return self.t.size - 1

    @property
    def T(self) -> float:
        return float(self.t[-1])

    @property
    def delta(self) -> np.ndarray:
        return np.diff(self.t)

    @property
    def h(self) -> float:
        return float(self.delta.max())


def make_uniform_partition(T: float, N: int) -> Partition:
    """Uniform grid t_i = i*T/N."""
    if not T > 0.0:
        raise ValueError(f"T must be positive, got {T}")
    if not (isinstance(N, (int, np.integer)) and N >= 1):
        raise ValueError(f"N must be a positive integer, got {N}")
    t = np.arange(N + 1) * (T / N)
    t[-1] = T  # endpoint exact
    return Partition(t)


def floor_index(p: Partition, s: float) -> int:
    """Largest i with t_i <= s, intervals right-open; s == T maps to N-1."""
    if s < 0.0 or s > p.T:
        raise ValueError(f"time {s} outside [0, {p.T}]")
    if s == p.T:
        return p.N - 1
    return int(np.searchsorted(p.t, s, side="right") - 1)


@dataclass(frozen=True)
class NoiseEnsemble:
    """Per-path, per-step increments; (m, i, :) plays the role of the
    Brownian increment over [t_i, t_{i+1}) with per-coordinate variance
    delta_i (Rademacher mode: +-sqrt(delta_i) equiprobable)."""

    partition: Partition
    mode: str
    increments: np.ndarray  # (M, N, d)
    seed: int | None
    enumerated: bool = field(default=False)

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        object.__setattr__(self, "increments", inc)
        if inc.ndim != 3:
            raise ValueError("increments must have shape (M, N, d)")
        if inc.shape[1] != self.partition.N:
            raise ValueError("increment step count does not match partition")
        if self.mode not in (GAUSSIAN, RADEMACHER):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        inc.setflags(write=False)

    @property
    def M(self) -> int:
        return self.increments.shape[0]

    @property
    def d(self) -> int:
        return self.increments.shape[2]

    def stream_id(self, m: int) -> tuple:
        return (self.seed, m)


def sample_noise_paths(
    p: Partition, m0: int, m1: int, d: int, mode: str, seed: int
) -> np.ndarray:
    """Increments for the path range [m0, m1); building block of
    sample_noise and of streaming consumers.

    Path m draws from Generator(Philox(SeedSequence(seed, spawn_key=(m,))))
    in step-major order, so entry (m, i, k) depends only on (seed, m, i, k).
    """
    if mode not in (GAUSSIAN, RADEMACHER):
        raise ValueError(f"unknown noise mode {mode!r}")
    N = p.N
    sqdt = np.sqrt(p.delta)[:, None]
    out = np.empty((m1 - m0, N, d))
    for j, m in enumerate(range(m0, m1)):
        ss = np.random.SeedSequence(entropy=seed, spawn_key=(m,))
        gen = np.random.Generator(np.random.Philox(ss))
        if mode == GAUSSIAN:
            out[j] = gen.standard_normal((N, d)) * sqdt
        else:
            signs = 2.0 * gen.integers(0, 2, size=(N, d)) - 1.0
            out[j] = signs * sqdt
    return out


def sample_noise(p: Partition, M: int, d: int, mode: str, seed: int) -> NoiseEnsemble:
    """Reproducible ensemble of M paths of d-dimensional increments."""
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    inc = sample_noise_paths(p, 0, M, d, mode, seed)
    return NoiseEnsemble(partition=p, mode=mode, increments=inc, seed=seed)


def enumerate_rademacher(p: Partition) -> NoiseEnsemble:
    """All 2^N sign paths (d = 1), for the exact-tree estimator.

    Path m takes sign +1 at step i iff bit i of m is set.
    """
    N = p.N
    if N > 14:
        raise ValueError(f"tree enumeration limited to N <= 14, got {N}")
    m = np.arange(2**N, dtype=np.uint32)[:, None]
    bits = (m >> np.arange(N, dtype=np.uint32)[None, :]) & 1
    signs = 2.0 * bits - 1.0
    inc = signs[:, :, None] * np.sqrt(p.delta)[None, :, None]
    return NoiseEnsemble(partition=p, mode=RADEMACHER, increments=inc, seed=None, enumerated=True)


@dataclass(frozen=True)
class RefinementMap:
    """Sends each coarse interval to its fine sub-intervals.

    bounds[j] is the fine index of coarse time t_j; coarse interval j covers
    fine steps bounds[j]..bounds[j+1]-1.
    """

    fine: Partition
    coarse: Partition
    bounds: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=np.int64)
        object.__setattr__(self, "bounds", b)
        if b.size != self.coarse.N + 1 or b[0] != 0 or b[-1] != self.fine.N:
            raise ValueError("bounds must map every coarse node onto the fine grid")
        if np.any(np.diff(b) < 1):
            raise ValueError("bounds must be strictly increasing")
        b.setflags(write=False)

    @property
    def ratio(self) -> int:
        """Refinement factor for uniformly nested grids."""
        r = np.diff(self.bounds)
        if not np.all(r == r[0]):
            raise ValueError("non-uniform refinement has no single ratio")
        return int(r[0])


def build_refinement(fine: Partition, coarse: Partition, rtol: float = 1e-9) -> RefinementMap:
    """Locate the coarse grid inside the fine grid; rejects non-nested grids."""
    idx = np.searchsorted(fine.t, coarse.t)
    idx = np.clip(idx, 0, fine.N)
    # searchsorted can land one off under rounding; snap to the closer node
    left = np.clip(idx - 1, 0, fine.N)
    idx = np.where(
        np.abs(fine.t[left] - coarse.t) < np.abs(fine.t[idx] - coarse.t), left, idx
    )
    scale = max(coarse.T, 1.0)
    if not np.allclose(fine.t[idx], coarse.t, rtol=0.0, atol=rtol * scale):
        raise CouplingError("coarse grid is not a subset of the fine grid")
    return RefinementMap(fine=fine, coarse=coarse, bounds=idx)


def refine_couple(fine: NoiseEnsemble, rmap: RefinementMap) -> NoiseEnsemble:
    """Coarse ensemble whose increment over a coarse interval is the sum of
    the mapped fine increments; path identities are preserved."""
    if fine.partition is not rmap.fine and not np.array_equal(fine.partition.t, rmap.fine.t):
        raise CouplingError("ensemble partition does not match the map's fine grid")
    if fine.mode == RADEMACHER and np.any(np.diff(rmap.bounds) > 1):
        raise CouplingError("summed rademacher increments are not two-point; coarsen gaussian noise only")
    inc = np.add.reduceat(fine.increments, rmap.bounds[:-1], axis=1)
    return NoiseEnsemble(
        partition=rmap.coarse, mode=fine.mode, increments=inc, seed=fine.seed
    )
