import math

import numpy as np
import pytest

from qsde.errors import CouplingError
from qsde.grids import (
    Partition,
    build_refinement,
    enumerate_rademacher,
    floor_index,
    make_uniform_partition,
    refine_couple,
    sample_noise,
    sample_noise_paths,
)


def test_uniform_partition_examples():
    p = make_uniform_partition(1.0, 4)
    assert np.allclose(p.t, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert p.h == 0.25

    p1 = make_uniform_partition(1.0, 1)
    assert list(p1.t) == [0.0, 1.0]
    assert p1.h == 1.0

    p8 = make_uniform_partition(2.0, 8)
    assert np.allclose(p8.delta, 0.25)


def test_partition_validation():
    with pytest.raises(ValueError):
        make_uniform_partition(1.0, 0)
    with pytest.raises(ValueError):
        make_uniform_partition(0.0, 4)
    with pytest.raises(ValueError):
        make_uniform_partition(-1.0, 4)
    with pytest.raises(ValueError):
        Partition(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(ValueError):
        Partition(np.array([0.1, 0.5, 1.0]))


def test_partition_telescoping_compensated():
    for n in (3, 7, 100, 1000):
        p = make_uniform_partition(1.0, n)
        assert math.fsum(p.delta) == pytest.approx(1.0, abs=1e-15)


def test_floor_index():
    p = make_uniform_partition(1.0, 4)
    assert floor_index(p, 0.3) == 1
    assert floor_index(p, 0.0) == 0
    assert floor_index(p, 1.0) == 3  # t = T belongs to the last interval
    assert floor_index(p, 0.25) == 1
    with pytest.raises(ValueError):
        floor_index(p, -0.1)
    with pytest.raises(ValueError):
        floor_index(p, 1.1)


def test_noise_determinism_and_chunk_independence():
    p = make_uniform_partition(1.0, 8)
    a = sample_noise(p, 32, 2, "gaussian", 123)
    b = sample_noise(p, 32, 2, "gaussian", 123)
    assert np.array_equal(a.increments, b.increments)

    # generating any path range gives the same values: worker-count independent
    mid = sample_noise_paths(p, 10, 20, 2, "gaussian", 123)
    assert np.array_equal(mid, a.increments[10:20])

    c = sample_noise(p, 32, 2, "gaussian", 124)
    assert not np.array_equal(a.increments, c.increments)


def test_rademacher_entries_and_variance():
    p = make_uniform_partition(1.0, 4)  # delta = 0.25 -> entries +-0.5
    n = sample_noise(p, 64, 1, "rademacher", 7)
    assert set(np.unique(n.increments)) == {-0.5, 0.5}
    # exact two-point second moment: both values square to delta
    assert np.allclose(n.increments**2, 0.25)


def test_gaussian_moments():
    p = make_uniform_partition(1.0, 1)
    m = 100_000
    n = sample_noise(p, m, 1, "gaussian", 99)
    x = n.increments[:, 0, 0]
    assert abs(x.mean()) < 4.0 / np.sqrt(m)
    assert abs(x.var() - 1.0) < 0.05


def test_refine_couple_sums():
    fine = make_uniform_partition(1.0, 2)
    coarse = make_uniform_partition(1.0, 1)
    rmap = build_refinement(fine, coarse)
    ens = sample_noise(fine, 3, 1, "gaussian", 0)
    inc = np.array(ens.increments)
    inc[0, 0, 0], inc[0, 1, 0] = 0.1, -0.2
    from qsde.grids import NoiseEnsemble

    ens2 = NoiseEnsemble(partition=fine, mode="gaussian", increments=inc, seed=0)
    c = refine_couple(ens2, rmap)
    assert c.increments[0, 0, 0] == pytest.approx(-0.1)

    # factor-1 refinement is the identity
    rid = build_refinement(fine, fine)
    cid = refine_couple(ens, rid)
    assert np.array_equal(cid.increments, ens.increments)


def test_coupling_exactness_roundoff():
    # summation regrouping is exact only up to float64 round-off (ledger)
    fine = make_uniform_partition(1.0, 256)
    coarse = make_uniform_partition(1.0, 16)
    rmap = build_refinement(fine, coarse)
    ens = sample_noise(fine, 50, 1, "gaussian", 11)
    c = refine_couple(ens, rmap)
    ends_fine = np.cumsum(ens.increments.sum(axis=2), axis=1)[:, rmap.bounds[1:] - 1]
    ends_coarse = np.cumsum(c.increments.sum(axis=2), axis=1)
    assert np.allclose(ends_fine, ends_coarse, rtol=0.0, atol=1e-12)
    # telescoping: total increment agrees across grids
    assert np.allclose(
        ens.increments.sum(axis=1), c.increments.sum(axis=1), rtol=0.0, atol=1e-12
    )


def test_refinement_rejects_mismatch():
    fine = make_uniform_partition(1.0, 8)
    other = make_uniform_partition(1.0, 3)
    with pytest.raises(CouplingError):
        build_refinement(fine, other)
    coarse = make_uniform_partition(1.0, 4)
    rmap = build_refinement(fine, coarse)
    ens = sample_noise(coarse, 3, 1, "gaussian", 0)
    with pytest.raises(CouplingError):
        refine_couple(ens, rmap)  # ensemble lives on the coarse grid


def test_rademacher_coarsening_rejected():
    fine = make_uniform_partition(1.0, 8)
    coarse = make_uniform_partition(1.0, 4)
    rmap = build_refinement(fine, coarse)
    ens = sample_noise(fine, 3, 1, "rademacher", 0)
    with pytest.raises(CouplingError):
        refine_couple(ens, rmap)


def test_enumerate_rademacher_layout():
    p = make_uniform_partition(1.0, 3)
    ens = enumerate_rademacher(p)
    assert ens.M == 8 and ens.enumerated
    signs = np.sign(ens.increments[:, :, 0])
    # bit i of the path index is the sign of step i
    for m in range(8):
        for i in range(3):
            assert signs[m, i] == (1.0 if (m >> i) & 1 else -1.0)
    with pytest.raises(ValueError):
        enumerate_rademacher(make_uniform_partition(1.0, 15))
