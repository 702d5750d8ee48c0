"""Classical Tikhonov regularization with the Morozov discrepancy principle."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .ias import phase1_update
from .krylov import KrylovOptions
from .operators import LinearOperator
from .regularizer import SparsifyingOperator, scale_by_theta


class MorozovBracketError(ValueError):
    """The discrepancy target lies below ``h(alpha_min)`` even after expansion."""


@dataclass
class MorozovOptions:
    alpha_min: float = 1e-16
    alpha_max: float = 1e10
    rel_tol: float = 0.01
    max_bisect: int = 60
    expand: float = 1e3

    def __post_init__(self):
        if not 0 < self.alpha_min < self.alpha_max:
            raise ValueError("need 0 < alpha_min < alpha_max")


@dataclass
class MorozovResult:
    alpha: float
    x: np.ndarray
    evals: int
    converged: bool
    bracket_valid: bool = True
    trace: list = field(default_factory=list)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["alpha", "discrepancy"])
            for a, h in self.trace:
                w.writerow([f"{a:.17g}", f"{h:.17g}"])


def tikhonov_solve(A: LinearOperator, Lop: SparsifyingOperator, alpha, b, opts: KrylovOptions | None = None):
    """Minimize ``||A x - b||^2 + alpha ||L x||^2``; returns ``(x, info)``.

    Realized as one Phase I solve with every group variance equal to ``1/alpha``.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    Lt = scale_by_theta(Lop, np.full(Lop.partition.n_groups, 1.0 / alpha))
    _, x, info = phase1_update(A, Lt, b, opts)
    return x, info


def discrepancy(A: LinearOperator, x, b) -> float:
    r = A.forward(x) - np.asarray(b, float)
    return float(r @ r)


def morozov_bisect(A, Lop, b, sigma, m=None, mopts: MorozovOptions | None = None,
                   kopts: KrylovOptions | None = None) -> MorozovResult:
    """Geometric bisection for ``h(alpha) = m sigma^2``.

    Trial values are ``sqrt(alpha_lo * alpha_hi)``; the search stops when
    ``|h - m sigma^2| <= rel_tol * m sigma^2``. The end points are only
    evaluated if the bracket collapses onto one of them without a trial on
    that side, so a valid bracket costs nothing extra. An invalid upper end
    is expanded once; if the target is still out of reach the solution at
    the upper end is returned with ``bracket_valid=False``.
    """
    mopts = mopts or MorozovOptions()
    m = A.rows if m is None else m
    target = m * sigma**2
    tol = mopts.rel_tol * target
    trace = []

    def h_of(alpha):
        x, _ = tikhonov_solve(A, Lop, alpha, b, kopts)
        h = discrepancy(A, x, b)
        trace.append((alpha, h))
        return x, h

    lo, hi = mopts.alpha_min, mopts.alpha_max
    lo_seen = hi_seen = False
    lo_expanded = hi_expanded = False
    best = None
    while len(trace) < mopts.max_bisect:
        if math.log10(hi / lo) < 1e-3 and not (lo_seen and hi_seen):
            if not hi_seen:
                x, h = h_of(hi)
                best = _closer(best, (hi, x, h), target)
                if h >= target:
                    hi_seen = True
                    continue
                if hi_expanded:
                    return MorozovResult(hi, x, len(trace), False, False, trace)
                lo, hi, lo_seen, hi_expanded = hi, hi * mopts.expand, True, True
                continue
            x, h = h_of(lo)
            best = _closer(best, (lo, x, h), target)
            if h < target:
                lo_seen = True
                continue
            if lo_expanded:
                raise MorozovBracketError(
                    f"discrepancy {h:g} at alpha={lo:g} already exceeds the target {target:g}")
            lo, hi, hi_seen, lo_expanded = lo / mopts.expand, lo, True, True
            continue
        alpha = math.sqrt(lo * hi)
        x, h = h_of(alpha)
        best = _closer(best, (alpha, x, h), target)
        if abs(h - target) <= tol:
            return MorozovResult(alpha, x, len(trace), True, True, trace)
        if h < target:
            lo, lo_seen = alpha, True
        else:
            hi, hi_seen = alpha, True
    a, x, _ = best
    return MorozovResult(a, x, len(trace), False, True, trace)


def _closer(best, cand, target):
    if best is None or abs(cand[2] - target) < abs(best[2] - target):
        return cand
    return best


def alpha_from_theta(sigma, theta):
    """Regularization parameter ``sigma / sqrt(theta)`` equivalent to a prior variance."""
    theta = np.asarray(theta, float)
    if np.any(theta <= 0):
        raise ValueError("theta must be positive")
    out = sigma / np.sqrt(theta)
    return float(out) if out.ndim == 0 else out
