"""Generalized gamma hyperprior: Gibbs energy, variance updates, parameter rules.

For a group of size ``k`` with parameters ``(r, beta, vartheta)`` the
variance update minimizes, over ``lambda = theta / vartheta``,

    g(lambda) = t^2 / (2 lambda) + lambda^r - eta log(lambda),
    t = ||z_group|| / sqrt(vartheta),   eta = r beta - (k + 2) / 2.

Its critical point solves ``F(lambda) = r lambda^r - eta - t^2/(2 lambda) = 0``.
For ``r = 1`` and ``r = -1`` this is explicit; otherwise ``lambda(t)`` is
traced from ``t = 0`` by an ODE and polished with Newton's method.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammaln

from .regularizer import Partition

ODE_STEPS_MAX = 100
COMPAT_R2 = (0.5, -0.5, -1.0)


class AdmissibilityError(ValueError):
    """Hyperparameters violate a sign or positivity requirement."""


class NoCompatibleSolution(ValueError):
    """The compatibility equations have no admissible root in the bracket."""


@dataclass(frozen=True)
class GenGammaParams:
    """Per-group hyperparameters ``(r, beta_l, vartheta_l)``."""

    r: float
    betas: np.ndarray
    varthetas: np.ndarray

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.betas, float))
        v = np.atleast_1d(np.asarray(self.varthetas, float))
        if self.r == 0 or not np.isfinite(self.r):
            raise AdmissibilityError("r must be a nonzero finite number")
        if b.shape != v.shape:
            b, v = np.broadcast_arrays(b, v)
            b, v = b.copy(), v.copy()
        if np.any(~(b > 0)):
            raise AdmissibilityError("every beta must be positive")
        if np.any(~(v > 0)):
            raise AdmissibilityError("every vartheta must be positive")
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "varthetas", v)

    @classmethod
    def uniform(cls, r, beta, vartheta, n_groups):
        return cls(r, np.full(n_groups, float(beta)), np.full(n_groups, float(vartheta)))

    @classmethod
    def from_eta(cls, eta, vartheta, sizes, r=1.0):
        """Choose ``beta`` so that ``r beta - (k+2)/2 = eta`` in every group."""
        sizes = np.asarray(sizes, float)
        eta = np.broadcast_to(np.asarray(eta, float), sizes.shape)
        betas = (eta + (sizes + 2) / 2) / r
        return cls(r, betas, np.broadcast_to(np.asarray(vartheta, float), sizes.shape).copy())

    @property
    def n_groups(self) -> int:
        return self.betas.size

    def etas(self, sizes) -> np.ndarray:
        return self.r * self.betas - (np.asarray(sizes, float) + 2) / 2

    def to_dict(self) -> dict:
        return {"r": self.r, "beta": self.betas.tolist(), "vartheta": self.varthetas.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"r", "beta", "vartheta"}
        if unknown:
            raise ValueError(f"unknown hyperparameter keys: {sorted(unknown)}")
        return cls(d["r"], d["beta"], d["vartheta"])

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def phi(theta, params: GenGammaParams, sizes) -> float:
    """Hyperprior part of the Gibbs energy, ``sum (theta/vartheta)^r - eta log(theta/vartheta)``."""
    theta = np.asarray(theta, float)
    if np.any(~(theta > 0)):
        raise ValueError("theta must be positive")
    ratio = theta / params.varthetas
    return float(np.sum(ratio**params.r) - np.sum(params.etas(sizes) * np.log(ratio)))


def phi_grad(theta, params: GenGammaParams, sizes) -> np.ndarray:
    theta = np.asarray(theta, float)
    v, r = params.varthetas, params.r
    return r * theta ** (r - 1) / v**r - params.etas(sizes) / theta


def g_tilde(lam, t, eta, r):
    """Nondimensional group objective."""
    return t**2 / (2 * lam) + lam**r - eta * np.log(lam)


def g_tilde_prime(lam, t, eta, r):
    return -(t**2) / (2 * lam**2) + r * lam ** (r - 1) - eta / lam


def update_variance_closed(t, eta, r):
    """Minimizer of ``g`` for ``r = 1`` (needs ``eta > 0``) or ``r = -1`` (needs ``eta < 0``)."""
    t = np.asarray(t, float)
    eta = np.asarray(eta, float)
    if r == 1:
        if np.any(~(eta > 0)):
            raise AdmissibilityError("the r = 1 update needs eta > 0")
        return 0.5 * (eta + np.sqrt(eta**2 + 2 * t**2))
    if r == -1:
        if np.any(~(eta < 0)):
            raise AdmissibilityError("the r = -1 update needs eta < 0")
        return (0.5 * t**2 + 1) / np.abs(eta)
    raise ValueError(f"no closed form for r = {r}")


def _ode_rhs(s, f, r):
    return 2 * s * f / (2 * r * r * f ** (r + 1) + s * s)


def _newton_polish(lam, t, eta, r, iters=30):
    # F is increasing in lambda, so a positive bracket-free Newton iteration
    # with step halving is enough
    for _ in range(iters):
        F = r * lam**r - eta - t**2 / (2 * lam)
        dF = r * r * lam ** (r - 1) + t**2 / (2 * lam**2)
        step = F / dF
        new = lam - step
        bad = new <= 0
        while np.any(bad):
            step = np.where(bad, step / 2, step)
            new = lam - step
            bad = new <= 0
        done = np.abs(step) <= 1e-15 * lam
        lam = new
        if np.all(done):
            break
    return lam


def update_variance_ode(t, beta, k_ell, r):
    """Trace the critical point from ``t = 0`` with classical Runge-Kutta.

    The step is ``h = min(t, 0.01 max(1, t))`` so at most 100 steps are
    taken; Newton's method then polishes the result on the optimality
    condition.
    """
    t, beta, k_ell = np.broadcast_arrays(np.asarray(t, float), np.asarray(beta, float), np.asarray(k_ell, float))
    c0 = beta - (k_ell + 2) / (2 * r)
    if np.any(~(c0 > 0)):
        raise AdmissibilityError("the ODE start needs beta - (k+2)/(2r) > 0")
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    f = c0 ** (1.0 / r)
    h = np.minimum(t, 0.01 * np.maximum(1.0, t))
    nsteps = np.where(t > 0, np.ceil(t / np.where(h > 0, h, 1.0) - 1e-9), 0).astype(int)
    h = np.where(nsteps > 0, t / np.maximum(nsteps, 1), 0.0)
    s = np.zeros_like(t)
    for i in range(int(nsteps.max(initial=0))):
        active = i < nsteps
        k1 = _ode_rhs(s, f, r)
        k2 = _ode_rhs(s + h / 2, f + h / 2 * k1, r)
        k3 = _ode_rhs(s + h / 2, f + h / 2 * k2, r)
        k4 = _ode_rhs(s + h, f + h * k3, r)
        f = np.where(active, f + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4), f)
        s = np.where(active, s + h, s)
    eta = r * beta - (k_ell + 2) / 2
    lam = np.where(t > 0, _newton_polish(f, t, eta, r), f)
    return lam if lam.ndim else float(lam)


def phase2_update(z, partition: Partition, params: GenGammaParams, method="auto"):
    """New group variances ``theta = vartheta * lambda(t)`` for the current ``z``.

    ``method`` is ``'auto'`` (closed form when ``r = +-1``), ``'closed'`` or
    ``'ode'``.
    """
    sizes = partition.sizes
    if params.n_groups != partition.n_groups:
        raise ValueError(f"{params.n_groups} hyperparameter groups for {partition.n_groups} partition groups")
    t = partition.group_norms(z) / np.sqrt(params.varthetas)
    r = params.r
    use_closed = method == "closed" or (method == "auto" and r in (1.0, -1.0))
    if use_closed:
        lam = update_variance_closed(t, params.etas(sizes), r)
    else:
        lam = update_variance_ode(t, params.betas, sizes, r)
    return params.varthetas * lam


def group_objective(theta, z, partition: Partition, params: GenGammaParams):
    """Per-group terms ``||z_l||^2/(2 theta_l) + (theta_l/vartheta_l)^r - eta_l log(theta_l/vartheta_l)``."""
    theta = np.asarray(theta, float)
    ratio = theta / params.varthetas
    zz = partition.group_norms(z) ** 2
    return zz / (2 * theta) + ratio**params.r - params.etas(partition.sizes) * np.log(ratio)


def select_scale_snr(frob_sq, m, sigma, snr, beta):
    """Scale making the prior signal energy match the SNR: ``m sigma^2 (SNR-1) / (beta ||A||_F^2)``."""
    if not snr > 1:
        raise ValueError(f"SNR must exceed 1, got {snr}")
    if not (frob_sq > 0 and sigma > 0 and beta > 0):
        raise ValueError("frob_sq, sigma and beta must be positive")
    return m * sigma**2 * (snr - 1) / (beta * frob_sq)


def sensitivity_weights(col_norms, snr, alpha):
    """``vartheta_j = alpha SNR / ||a_j||^2``."""
    col_norms = np.asarray(col_norms, float)
    zero = np.flatnonzero(col_norms <= 0)
    if zero.size:
        raise ValueError(f"column {zero[0]} of A is zero; the data carry no information about it")
    return alpha * snr / col_norms**2


def _compat_lower(r2, k):
    lo = 0.0
    if r2 < 0:
        lo = max(lo, -1.0 / r2)
    else:
        lo = max(lo, (k + 2) / (2 * r2))
    return lo


def compat_residuals(beta1, vartheta1, k, beta2, vartheta2, r2):
    """Relative residuals of the baseline and expected-variance matching equations."""
    base1 = vartheta1 * (beta1 - (k + 2) / 2)
    base2 = vartheta2 * (beta2 - (k + 2) / (2 * r2)) ** (1 / r2)
    mean1 = vartheta1 * beta1
    mean2 = vartheta2 * math.exp(gammaln(beta2 + 1 / r2) - gammaln(beta2))
    return abs(base1 - base2) / abs(base1), abs(mean1 - mean2) / abs(mean1)


def _compat_scalar(beta1, vartheta1, r2, k):
    eta1 = beta1 - (k + 2) / 2
    if not eta1 > 0:
        raise AdmissibilityError("the first-stage parameters need beta - (k+2)/2 > 0")
    target = math.log(beta1 / eta1)
    c2 = (k + 2) / (2 * r2)

    def h(b):
        return gammaln(b + 1 / r2) - gammaln(b) - math.log(b - c2) / r2 - target

    lower = _compat_lower(r2, k)
    lo = lower + 1e-13 * max(1.0, lower)
    hi = max(2 * lower, lower + 1.0)
    if not h(lo) > 0:
        raise NoCompatibleSolution(f"no sign change: h({lo:g}) = {h(lo):g} is not positive")
    while h(hi) > 0:
        hi *= 10
        if hi > 1e12:
            raise NoCompatibleSolution(f"no root of the compatibility equation in ({lo:g}, 1e12]")
    beta2 = brentq(h, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    vartheta2 = vartheta1 * eta1 / (beta2 - c2) ** (1 / r2)
    return beta2, vartheta2


def hybrid_compat_solve(params1: GenGammaParams, r2, k_ell=1):
    """Second-stage ``(beta2, vartheta2)`` matching baseline variance and expected variance.

    The baseline condition gives ``vartheta2`` in terms of ``beta2``; the
    expected-variance condition then becomes a scalar equation in ``beta2``
    solved by Brent's method on a bracket that starts at the admissibility
    bound and is expanded outward.
    """
    if params1.r != 1:
        raise ValueError("the first-stage hyperprior must have r = 1")
    if r2 == 1:
        return params1.betas.copy(), params1.varthetas.copy()
    if r2 not in COMPAT_R2:
        raise ValueError(f"r2 must be one of {COMPAT_R2} (or 1), got {r2}")
    k = np.broadcast_to(np.asarray(k_ell, float), params1.betas.shape)
    out = [_compat_scalar(b, v, float(r2), kk) for b, v, kk in zip(params1.betas, params1.varthetas, k)]
    beta2, vartheta2 = (np.array(x) for x in zip(*out))
    return beta2, vartheta2
