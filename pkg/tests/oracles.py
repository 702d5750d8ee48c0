"""Independent reference computations used only by the tests.

Nothing here imports the package: every oracle is a plain dense numpy
computation or a textbook 1-D / proximal algorithm.
"""

import math

import numpy as np

GOLDEN = (math.sqrt(5) - 1) / 2


def golden_section(f, lo, hi, tol=1e-13, max_iter=500):
    """Minimizer of a unimodal ``f`` on ``[lo, hi]``."""
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def g_nd(lam, t, eta, r):
    return t * t / (2 * lam) + lam**r - eta * math.log(lam)


def minimize_g(t, eta, r):
    """Golden-section minimizer of the nondimensional group objective in log(lambda)."""
    f = lambda s: g_nd(math.exp(s), t, eta, r)  # noqa: E731
    return math.exp(golden_section(f, -40.0, 40.0))


def dense_ridge(A, b, shift=1.0):
    """``(A^T A + shift I)^{-1} A^T b``."""
    n = A.shape[1]
    return np.linalg.solve(A.T @ A + shift * np.eye(n), A.T @ b)


def dense_general_tikhonov(A, L, b, alpha):
    return np.linalg.solve(A.T @ A + alpha * L.T @ L, A.T @ b)


def fista_l1(A, b, weights, iters=20000):
    """Minimize ``1/2 ||A z - b||^2 + sum w_j |z_j|`` by accelerated proximal gradient."""
    step = 1.0 / np.linalg.norm(A, 2) ** 2
    z = np.zeros(A.shape[1])
    y = z.copy()
    t = 1.0
    for _ in range(iters):
        u = y - step * (A.T @ (A @ y - b))
        z_new = np.sign(u) * np.maximum(np.abs(u) - step * weights, 0.0)
        t_new = (1 + math.sqrt(1 + 4 * t * t)) / 2
        y = z_new + (t - 1) / t_new * (z_new - z)
        z, t = z_new, t_new
    return z


def coordinate_descent_l1(A, b, weights, sweeps=5000):
    """Cyclic coordinate descent for the same weighted lasso."""
    n = A.shape[1]
    z = np.zeros(n)
    r = b.copy()
    col2 = np.sum(A * A, axis=0)
    for _ in range(sweeps):
        for j in range(n):
            rho = A[:, j] @ r + col2[j] * z[j]
            zj = np.sign(rho) * max(abs(rho) - weights[j], 0.0) / col2[j]
            r += A[:, j] * (z[j] - zj)
            z[j] = zj
    return z


def chord_length(p, d, center, radius):
    """Length of the line ``p + s d`` (unit ``d``) inside a disk."""
    rel = np.asarray(center) - np.asarray(p)
    along = rel @ d
    dist2 = rel @ rel - along**2
    return 2 * math.sqrt(max(radius**2 - dist2, 0.0))


def square_chord(p, d, half=1.0):
    """Length of the line ``p + s d`` inside ``[-half, half]^2`` (Liang-Barsky clipping)."""
    lo, hi = -math.inf, math.inf
    for pi, di in zip(p, d):
        if abs(di) < 1e-300:
            if abs(pi) > half:
                return 0.0
            continue
        s1, s2 = (-half - pi) / di, (half - pi) / di
        lo, hi = max(lo, min(s1, s2)), min(hi, max(s1, s2))
    return max(hi - lo, 0.0)
