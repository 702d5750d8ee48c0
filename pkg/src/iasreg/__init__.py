"""Hierarchical Bayesian (IAS) regularization of linear inverse problems with Krylov inner solvers."""

__version__ = "0.1.0"

from .classic import MorozovOptions, alpha_from_theta, discrepancy, morozov_bisect, tikhonov_solve
from .hyperprior import (
    GenGammaParams,
    hybrid_compat_solve,
    phase2_update,
    phi,
    select_scale_snr,
    sensitivity_weights,
    update_variance_closed,
    update_variance_ode,
)
from .ias import HybridOptions, IasOptions, IasResult, fixed_point_residual, hybrid_ias_solve, ias_solve, objective
from .krylov import KrylovOptions, lanczos_bidiag, lanczos_tridiag, solve_shifted_sym, solve_tikhonov_standard
from .operators import LinearOperator, NoiseModel, compose, dense, identity, sparse, whiten
from .problems import Problem, make_numdiff, make_tomo, snr_estimate, snr_prior
from .regularizer import Partition, SparsifyingOperator, build_L, pinv_apply, pinv_adjoint_apply, scale_by_theta
