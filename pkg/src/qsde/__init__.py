"""Numerical schemes for decoupled forward-backward SDEs with quadratic
drivers and low-regularity drift: Euler-Maruyama forward simulation,
explicit backward induction with truncated drivers and clamped weights,
pluggable conditional-expectation estimators, Malliavin-weight control
estimates, a 1-d Kolmogorov-PDE drift transformation, and a convergence
study harness."""

from qsde.grids import (
    Partition,
    NoiseEnsemble,
    RefinementMap,
    make_uniform_partition,
    floor_index,
    sample_noise,
    enumerate_rademacher,
    build_refinement,
    refine_couple,
)
from qsde.forward import DriftSpec, EulerSolution, make_drift, euler_maruyama, strong_error, quadrature_error
from qsde.drivers import (
    DriverSpec,
    TruncatedDriver,
    TerminalFunctional,
    make_driver,
    make_terminal,
    truncate_driver,
    eval_terminal,
    discretize_functional,
)
from qsde.condexp import BasisSpec, LsmcEstimator, NestedEstimator, ExactTreeEstimator, make_estimator
from qsde.btz import (
    WeightSpec,
    BtzSolution,
    make_weights,
    run_btz,
    run_centered,
    check_uniform_bound,
    check_discrete_bmo,
    malliavin_z,
    oracle,
)
from qsde.zvonkin import PdeGrid, ZvonkinSolution, solve_mild, find_lambda, transform_drift
from qsde.harness import StudySpec, ConvergenceReport, btz_error, fit_rate, run_study

__all__ = [
    "Partition",
    "NoiseEnsemble",
    "RefinementMap",
    "make_uniform_partition",
    "floor_index",
    "sample_noise",
    "enumerate_rademacher",
    "build_refinement",
    "refine_couple",
    "DriftSpec",
    "EulerSolution",
    "make_drift",
    "euler_maruyama",
    "strong_error",
    "quadrature_error",
    "DriverSpec",
    "TruncatedDriver",
    "TerminalFunctional",
    "make_driver",
    "make_terminal",
    "truncate_driver",
    "eval_terminal",
    "discretize_functional",
    "BasisSpec",
    "LsmcEstimator",
    "NestedEstimator",
    "ExactTreeEstimator",
    "make_estimator",
    "WeightSpec",
    "BtzSolution",
    "make_weights",
    "run_btz",
    "run_centered",
    "check_uniform_bound",
    "check_discrete_bmo",
    "malliavin_z",
    "oracle",
    "PdeGrid",
    "ZvonkinSolution",
    "solve_mild",
    "find_lambda",
    "transform_drift",
    "StudySpec",
    "ConvergenceReport",
    "btz_error",
    "fit_rate",
    "run_study",
]
