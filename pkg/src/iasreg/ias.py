"""Iterative alternating sequential (IAS) MAP solver.

The Gibbs energy of the whitened model is

    G(x, theta) = 1/2 ||b - A x||^2 + 1/2 sum_l ||(L x)_l||^2 / theta_l + Phi(theta),

and IAS minimizes it block by block: Phase I solves a standard-form
Tikhonov problem in ``xi = L_theta x`` for fixed ``theta``, Phase II updates
every group variance independently for fixed ``z = L x``. Both half-steps
are exact minimizations, so ``G`` never increases.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .hyperprior import GenGammaParams, hybrid_compat_solve, phase2_update, phi
from .krylov import KrylovOptions, SolveInfo, solve_tikhonov_standard
from .operators import LinearOperator, compose
from .regularizer import ScaledOperator, SparsifyingOperator, pinv_apply, pinv_via_qr, scale_by_theta

SWITCH_RULES = ("stagnation", "fixed")


@dataclass
class HybridOptions:
    """Two-stage schedule: ``r = 1`` first, then a greedier ``r2``.

    ``switch_rule='fixed'`` switches after ``count`` outer iterations;
    ``'stagnation'`` switches once the relative change of theta drops below
    ``tol`` (default ``10 * delta``). ``params2=None`` derives the second
    stage from the compatibility conditions.
    """

    r2: float = 0.5
    switch_rule: str = "stagnation"
    count: int = 0
    tol: float | None = None
    params2: GenGammaParams | None = None

    def __post_init__(self):
        if self.switch_rule not in SWITCH_RULES:
            raise ValueError(f"switch_rule must be one of {SWITCH_RULES}")
        if self.count < 0:
            raise ValueError("count must be nonnegative")


@dataclass
class IasOptions:
    delta: float = 0.01
    max_outer: int = 100
    krylov: KrylovOptions = field(default_factory=KrylovOptions)
    hybrid: HybridOptions | None = None
    pinv: str = "implicit"
    track_objective: bool = True
    phase2_method: str = "auto"
    keep_history: bool = False

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.max_outer < 1:
            raise ValueError("max_outer must be positive")
        if self.pinv not in ("implicit", "qr"):
            raise ValueError("pinv must be 'implicit' or 'qr'")


@dataclass
class IasResult:
    x: np.ndarray
    z: np.ndarray
    theta: np.ndarray
    xi: np.ndarray
    outer_iterations: int
    objective_history: list
    inner_step_history: list
    converged: bool
    status: str = ""
    theta_change_history: list = field(default_factory=list)
    phase1_times: list = field(default_factory=list)
    phase2_times: list = field(default_factory=list)
    inner_info: list = field(default_factory=list)
    switch_iteration: int | None = None
    stage_starts: list = field(default_factory=lambda: [0])
    params: GenGammaParams | None = None
    x_history: list = field(default_factory=list)
    theta_history: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "outer_iterations": self.outer_iterations,
            "converged": self.converged,
            "status": self.status,
            "objective_history": [float(g) for g in self.objective_history],
            "theta_change_history": [float(c) for c in self.theta_change_history],
            "inner_step_history": [int(s) for s in self.inner_step_history],
            "phase1_seconds": [float(t) for t in self.phase1_times],
            "phase2_seconds": [float(t) for t in self.phase2_times],
            "switch_iteration": self.switch_iteration,
            "inner": [i.to_dict() for i in self.inner_info],
        }


def _x_from_z(Lop: SparsifyingOperator, z):
    return pinv_apply(scale_by_theta(Lop, np.ones(Lop.partition.n_groups)), z)


def objective(z, theta, A: LinearOperator, Lop: SparsifyingOperator, params: GenGammaParams, b) -> float:
    """Gibbs energy ``1/2||b - A L^+ z||^2 + 1/2 sum ||z_l||^2/theta_l + Phi(theta)``."""
    z = np.asarray(z, float)
    if z.shape != (Lop.shape[0],):
        raise ValueError(f"z has shape {z.shape}, expected ({Lop.shape[0]},)")
    x = _x_from_z(Lop, z)
    return _objective_xz(x, z, theta, A, Lop, params, b)


def _objective_xz(x, z, theta, A, Lop, params, b):
    part = Lop.partition
    res = np.asarray(b) - A.forward(x)
    prior = np.sum(part.group_norms(z) ** 2 / np.asarray(theta))
    return 0.5 * float(res @ res) + 0.5 * float(prior) + phi(theta, params, part.sizes)


def phase1_update(A: LinearOperator, Lt: ScaledOperator, b, opts: KrylovOptions | None = None, pinv="implicit"):
    """Minimize ``||A L_theta^+ xi - b||^2 + ||xi||^2``; returns ``(xi, x, info)``.

    ``A L_theta^+`` is only ever applied, never formed. ``pinv='qr'`` swaps
    the implicit normal-equation pseudoinverse for a dense QR one.
    """
    opts = opts or KrylovOptions()
    b = np.asarray(b, float)
    if pinv == "qr":
        P = pinv_via_qr(Lt).as_operator()
    else:
        P = Lt.pinv()
    if not np.any(b):
        xi = np.zeros(Lt.rows)
        info = SolveInfo(0, 0.0, 0.0, True, False, "none")
    else:
        xi, info = solve_tikhonov_standard(compose(A, P), b, opts)
    return xi, P.forward(xi), info


def _phase1_retry(A, Lt, b, kopts, pinv):
    xi, x, info = phase1_update(A, Lt, b, kopts, pinv)
    if not info.converged:
        tighter = replace(kopts, max_steps=2 * kopts.max_steps, rel_residual_tol=kopts.rel_residual_tol / 10)
        xi, x, info = phase1_update(A, Lt, b, tighter, pinv)
    return xi, x, info


def _check_params(Lop, params):
    if params.n_groups != Lop.partition.n_groups:
        raise ValueError(f"params have {params.n_groups} groups, the partition has {Lop.partition.n_groups}")


def _run(problem, Lop, params, opts: IasOptions, theta0, switch=None, result=None):
    """Core loop; ``switch(iteration, change)`` may end the run early for a stage change."""
    A, b = problem.A, np.asarray(problem.b, float)
    _check_params(Lop, params)
    part = Lop.partition
    theta = np.array(theta0, float)
    k = Lop.shape[0]
    if result is None:
        x = np.zeros(Lop.shape[1])
        z = np.zeros(k)
        result = IasResult(x, z, theta, np.zeros(k), 0, [], [], False, params=params)
        if opts.track_objective:
            result.objective_history.append(_objective_xz(x, z, theta, A, Lop, params, b))
    else:
        result.stage_starts.append(len(result.objective_history))
        result.params = params
        if opts.track_objective:
            result.objective_history.append(_objective_xz(result.x, result.z, theta, A, Lop, params, b))
    fired = False
    for it in range(1, opts.max_outer + 1):
        t0 = time.perf_counter()
        Lt = scale_by_theta(Lop, theta)
        xi, x, info = _phase1_retry(A, Lt, b, opts.krylov, opts.pinv)
        z = Lop.L @ x
        t1 = time.perf_counter()
        result.inner_step_history.append(info.steps)
        result.inner_info.append(info)
        if not info.converged:
            result.status = "inner solver did not converge after retry"
            result.x, result.z, result.xi = x, z, xi
            result.theta = theta
            result.outer_iterations += 1
            result.phase1_times.append(t1 - t0)
            return result, False
        if opts.track_objective:
            result.objective_history.append(_objective_xz(x, z, theta, A, Lop, params, b))
        t2 = time.perf_counter()
        new_theta = phase2_update(z, part, params, opts.phase2_method)
        t3 = time.perf_counter()
        change = float(np.linalg.norm(new_theta - theta) / np.linalg.norm(theta))
        theta = new_theta
        if opts.track_objective:
            result.objective_history.append(_objective_xz(x, z, theta, A, Lop, params, b))
        result.phase1_times.append(t1 - t0)
        result.phase2_times.append(t3 - t2)
        result.theta_change_history.append(change)
        result.outer_iterations += 1
        result.x, result.z, result.xi, result.theta = x, z, xi, theta
        if opts.keep_history:
            result.x_history.append(x)
            result.theta_history.append(theta)
        if switch is not None and switch(it, change):
            fired = True
            result.status = "switched"
            break
        if change < opts.delta:
            result.converged = True
            result.status = "converged"
            break
    else:
        result.status = "max_outer reached"
    return result, fired


def ias_solve(problem, Lop: SparsifyingOperator, params: GenGammaParams, opts: IasOptions | None = None,
              theta0=None) -> IasResult:
    """Run IAS on a whitened problem (anything with attributes ``A`` and ``b``).

    ``theta0`` defaults to ``vartheta``. Iteration stops when
    ``||theta_new - theta|| / ||theta|| < delta`` or after ``max_outer``
    outer iterations.
    """
    opts = opts or IasOptions()
    theta0 = params.varthetas if theta0 is None else np.broadcast_to(np.asarray(theta0, float), params.varthetas.shape)
    result, _ = _run(problem, Lop, params, opts, theta0)
    return result


def hybrid_ias_solve(problem, Lop: SparsifyingOperator, params1: GenGammaParams, opts: IasOptions) -> IasResult:
    """Gamma-hyperprior stage followed by a greedier generalized-gamma stage.

    The second stage starts from the first stage's final variances (or from
    its own ``vartheta`` when the switch happens before any iteration) and
    gets its own ``max_outer`` budget. Objective values after the switch use
    the second-stage hyperprior.
    """
    h = opts.hybrid
    if h is None:
        raise ValueError("hybrid options are not set")
    if params1.r != 1:
        raise ValueError("the first stage needs r = 1")
    if h.params2 is not None:
        params2 = h.params2
    else:
        sizes = Lop.partition.sizes
        beta2, vartheta2 = hybrid_compat_solve(params1, h.r2, sizes)
        params2 = GenGammaParams(h.r2, beta2, vartheta2)
    _check_params(Lop, params2)

    if h.switch_rule == "fixed" and h.count == 0:
        result, _ = _run(problem, Lop, params2, opts, params2.varthetas)
        result.switch_iteration = 0
        return result

    tol = h.tol if h.tol is not None else 10 * opts.delta
    if h.switch_rule == "fixed":
        def switch(it, change):
            return it >= h.count
    else:
        def switch(it, change):
            return change < tol

    result, fired = _run(problem, Lop, params1, opts, params1.varthetas, switch)
    if not fired:
        return result
    result.switch_iteration = result.outer_iterations
    result.converged = False
    result, _ = _run(problem, Lop, params2, opts, result.theta, None, result)
    return result


def fixed_point_residual(z, theta, params: GenGammaParams, variant="closed") -> float:
    """Relative distance of ``theta`` from the ``r = 1`` variance map evaluated at ``z``.

    ``variant='closed'`` uses ``vartheta (eta/2 + sqrt(eta^2/4 + z^2/(2 vartheta)))``,
    the exact Phase II minimizer. ``variant='doubled'`` uses the map with
    ``2 z^2 / vartheta`` under the root, kept as a diagnostic because it is
    not a fixed point of the iteration.
    """
    if params.r != 1:
        raise ValueError("fixed_point_residual is defined for r = 1 only")
    z = np.asarray(z, float)
    theta = np.asarray(theta, float)
    if not (z.shape == theta.shape == params.varthetas.shape):
        raise ValueError("fixed_point_residual needs a componentwise partition with L = I")
    v = params.varthetas
    eta = params.betas - 1.5
    if variant == "closed":
        f = v * (eta / 2 + np.sqrt(eta**2 / 4 + z**2 / (2 * v)))
    elif variant == "doubled":
        f = v * (eta / 2 + np.sqrt(eta**2 / 4 + 2 * z**2 / v))
    else:
        raise ValueError("variant must be 'closed' or 'doubled'")
    return float(np.linalg.norm(theta - f) / np.linalg.norm(theta))
