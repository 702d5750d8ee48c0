"""Lanczos processes and the shifted least-squares solves built on them.

Both the tridiagonal process on a symmetric ``M`` and the bidiagonal
(Golub-Kahan) process on a rectangular ``A`` feed the same projected
problem

    min_z || (T_{l+1,l} + I_{l+1,l}) z - ||c|| e_1 ||,

which is solved by Givens rotations updated one column at a time. The
rotated right-hand side gives the residual norm of ``(M + I) y = c`` for
free, so the iteration can stop on a relative residual tolerance.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .operators import LinearOperator

EPS = np.finfo(float).eps


class ZeroStartError(ValueError):
    """The Krylov process was started from the zero vector."""


@dataclass
class KrylovOptions:
    max_steps: int = 1000
    rel_residual_tol: float = 1e-8
    reorthogonalize: bool = True
    low_memory: bool = False
    check_symmetry: bool = False
    breakdown_tol: float = 1e-12

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if not 0 < self.rel_residual_tol < 1:
            raise ValueError("rel_residual_tol must lie in (0, 1)")


@dataclass(frozen=True)
class TridiagFactors:
    """Output of ``l`` tridiagonal Lanczos steps.

    ``V`` holds ``l + 1`` columns; when the process broke down the last one
    is zero and ``gammas[-1] == 0``.
    """

    V: np.ndarray
    alphas: np.ndarray
    gammas: np.ndarray
    terminated_early: bool

    @property
    def steps(self) -> int:
        return len(self.alphas)

    def T(self) -> np.ndarray:
        """Square ``l x l`` tridiagonal block."""
        return np.diag(self.alphas) + np.diag(self.gammas[:-1], 1) + np.diag(self.gammas[:-1], -1)

    def T_ext(self) -> np.ndarray:
        """The ``(l+1) x l`` matrix ``T_{l+1,l}``."""
        l = self.steps
        out = np.zeros((l + 1, l))
        out[:l] = self.T()
        out[l, l - 1] = self.gammas[-1]
        return out


@dataclass(frozen=True)
class BidiagFactors:
    """Output of ``l`` Golub-Kahan steps on ``A`` started at ``b``.

    ``rhos`` is the diagonal of the lower bidiagonal ``C_l``; ``sigmas``
    carries ``||b||`` first, then the subdiagonal entries, so
    ``sigmas[l]`` is the coupling to ``v_{l+1}``.
    """

    U: np.ndarray
    V: np.ndarray
    rhos: np.ndarray
    sigmas: np.ndarray
    terminated_early: bool

    @property
    def steps(self) -> int:
        return len(self.rhos)

    def C(self) -> np.ndarray:
        return np.diag(self.rhos) + np.diag(self.sigmas[1:-1], -1)

    def tridiagonal(self) -> tuple[np.ndarray, np.ndarray]:
        """Entries ``(alphas, gammas)`` of ``C C^T`` plus the trailing coupling."""
        rho = self.rhos
        sub = np.concatenate(([0.0], self.sigmas[1:-1]))
        alphas = rho**2 + sub**2
        gammas = rho * self.sigmas[1:]
        return alphas, gammas


@dataclass
class SolveInfo:
    """Diagnostics of one shifted solve; JSON-serializable through ``to_dict``."""

    steps: int
    residual_norm: float
    rhs_norm: float
    converged: bool
    breakdown: bool
    path: str = "tridiagonal"
    orthogonality_loss: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def rel_residual(self) -> float:
        return self.residual_norm / self.rhs_norm if self.rhs_norm > 0 else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rel_residual"] = self.rel_residual
        return d


# ---------------------------------------------------------------------------
# step-wise processes


def _orthogonalize(w, basis):
    # classical Gram-Schmidt applied twice
    if basis is None or basis.shape[1] == 0:
        return w
    for _ in range(2):
        w = w - basis @ (basis.T @ w)
    return w


class _Basis:
    """Growing column store, doubling its capacity as needed."""

    def __init__(self, dim, capacity=32):
        self._data = np.empty((dim, capacity))
        self.size = 0

    def append(self, v):
        if self.size == self._data.shape[1]:
            grown = np.empty((self._data.shape[0], 2 * self._data.shape[1]))
            grown[:, : self.size] = self._data[:, : self.size]
            self._data = grown
        self._data[:, self.size] = v
        self.size += 1

    @property
    def array(self):
        return self._data[:, : self.size]


class _Tridiagonal:
    def __init__(self, M: LinearOperator, c, reorth: bool, store: bool, breakdown_tol: float):
        self.M = M
        self.c_norm = float(np.linalg.norm(c))
        if self.c_norm == 0.0:
            raise ZeroStartError("Lanczos process needs a nonzero starting vector")
        self.v = c / self.c_norm
        self.v_prev = np.zeros_like(self.v)
        self.gamma_prev = 0.0
        self.reorth = reorth
        self.basis = _Basis(M.rows) if store or reorth else None
        if self.basis is not None:
            self.basis.append(self.v)
        self.tol = breakdown_tol
        self.scale = 0.0
        self.j = 0
        self.dim = M.rows

    def step(self):
        """One step; returns ``(alpha, gamma, broke_down)``."""
        w = self.M.forward(self.v) - self.gamma_prev * self.v_prev
        alpha = float(self.v @ w)
        w -= alpha * self.v
        if self.reorth:
            w = _orthogonalize(w, self.basis.array)
        gamma = float(np.linalg.norm(w))
        self.scale = max(self.scale, abs(alpha) + self.gamma_prev, gamma)
        self.j += 1
        broke = gamma <= self.tol * self.scale or self.j >= self.dim
        if broke:
            gamma_out = 0.0 if gamma <= self.tol * self.scale else gamma
            self.v_prev, self.v = self.v, (w / gamma if gamma > 0 else np.zeros_like(w))
            if self.basis is not None:
                self.basis.append(self.v if gamma_out > 0 else np.zeros_like(w))
            self.gamma_prev = gamma_out
            return alpha, gamma_out, True
        self.v_prev, self.v = self.v, w / gamma
        if self.basis is not None:
            self.basis.append(self.v)
        self.gamma_prev = gamma
        return alpha, gamma, False


class _GolubKahan:
    """Bidiagonalization of ``A`` started at ``b``; left vectors span K(AA^T, b)."""

    def __init__(self, A: LinearOperator, b, reorth: bool, store: bool, breakdown_tol: float):
        self.A = A
        beta = float(np.linalg.norm(b))
        if beta == 0.0:
            raise ZeroStartError("bidiagonalization needs a nonzero starting vector")
        self.sigmas = [beta]
        self.rhos = []
        self.v = b / beta
        self.reorth = reorth
        keep = store or reorth
        self.Vb = _Basis(A.rows) if keep else None
        self.Ub = _Basis(A.cols) if keep else None
        if keep:
            self.Vb.append(self.v)
        self.tol = breakdown_tol
        self.scale = 0.0
        self.dim = min(A.rows, A.cols)
        self.u = None
        self._next_u()

    def _next_u(self):
        q = self.A.adjoint(self.v)
        if self.u is not None:
            q -= self.sigmas[-1] * self.u
        if self.reorth:
            q = _orthogonalize(q, self.Ub.array)
        rho = float(np.linalg.norm(q))
        self.scale = max(self.scale, rho, self.sigmas[-1] if len(self.sigmas) > 1 else 0.0)
        if rho <= self.tol * max(self.scale, EPS) or rho == 0.0:
            self.rhos.append(0.0)
            self.u = np.zeros(self.A.cols)
        else:
            self.rhos.append(rho)
            self.u = q / rho
        if self.Ub is not None:
            self.Ub.append(self.u)

    def step(self):
        """Advance one column; returns ``(rho_j, sigma_{j+1}, broke_down)``.

        ``rho_j`` was computed at the end of the previous step (or in the
        constructor); this step forms ``v_{j+1}`` and the next ``u``.
        """
        rho = self.rhos[-1]
        j = len(self.rhos)
        if rho == 0.0:
            self.sigmas.append(0.0)
            if self.Vb is not None:
                self.Vb.append(np.zeros(self.A.rows))
            return rho, 0.0, True
        p = self.A.forward(self.u) - rho * self.v
        if self.reorth:
            p = _orthogonalize(p, self.Vb.array)
        sigma = float(np.linalg.norm(p))
        self.scale = max(self.scale, rho, sigma)
        if sigma <= self.tol * self.scale or j >= self.dim:
            small = sigma <= self.tol * self.scale
            self.sigmas.append(0.0 if small else sigma)
            self.v = p / sigma if not small else np.zeros_like(p)
            if self.Vb is not None:
                self.Vb.append(self.v)
            return rho, self.sigmas[-1], True
        self.sigmas.append(sigma)
        self.v = p / sigma
        if self.Vb is not None:
            self.Vb.append(self.v)
        self._next_u()
        return rho, sigma, False


class _ProjectedLS:
    """Incremental Givens QR of ``T_{l+1,l} + I_{l+1,l}``.

    Each new column carries ``(gamma_{j-1}, alpha_j + 1, gamma_j)``; the two
    previous rotations are applied to it, then a fresh rotation removes the
    subdiagonal. ``residual`` is the norm of the current LS residual.
    """

    def __init__(self, rhs_norm: float, shift: float = 1.0):
        self.shift = shift
        self.r0: list[float] = []
        self.r1: list[float] = []
        self.r2: list[float] = []
        self.g = [rhs_norm]
        self.rot = [(1.0, 0.0), (1.0, 0.0)]  # (c, s) of rotations j-2, j-1

    def add_column(self, alpha, gamma_prev, gamma):
        j = len(self.r0)
        d = alpha + self.shift
        (c2, s2), (c1, s1) = self.rot
        if j >= 2:
            r2, a = s2 * gamma_prev, c2 * gamma_prev
        else:
            r2, a = 0.0, gamma_prev
        if j >= 1:
            r1, d = c1 * a + s1 * d, -s1 * a + c1 * d
        else:
            r1 = 0.0
        rho = math.hypot(d, gamma)
        c, s = (d / rho, gamma / rho) if rho > 0 else (1.0, 0.0)
        self.r0.append(rho)
        self.r1.append(r1)
        self.r2.append(r2)
        gj = self.g[j]
        self.g[j] = c * gj
        self.g.append(-s * gj)
        self.rot = [(c1, s1), (c, s)]

    @property
    def residual(self) -> float:
        return abs(self.g[-1])

    def solve(self) -> np.ndarray:
        l = len(self.r0)
        z = np.zeros(l)
        for i in range(l - 1, -1, -1):
            acc = self.g[i]
            if i + 1 < l:
                acc -= self.r1[i + 1] * z[i + 1]
            if i + 2 < l:
                acc -= self.r2[i + 2] * z[i + 2]
            z[i] = acc / self.r0[i]
        return z


# ---------------------------------------------------------------------------
# public processes


def _check_symmetric(M: LinearOperator, rng=None, pairs=5, tol=1e-8):
    rng = np.random.default_rng(rng)
    for _ in range(pairs):
        v, w = rng.standard_normal(M.cols), rng.standard_normal(M.cols)
        Mv, Mw = M.forward(v), M.forward(w)
        lhs, rhs = Mv @ w, v @ Mw
        if abs(lhs - rhs) > tol * max(1.0, np.linalg.norm(Mv) * np.linalg.norm(w)):
            raise ValueError("operator failed the stochastic symmetry check")


def lanczos_tridiag(M: LinearOperator, c, opts: KrylovOptions | None = None) -> TridiagFactors:
    """Run tridiagonal Lanczos on symmetric ``M`` from ``c`` for up to ``max_steps`` steps."""
    opts = opts or KrylovOptions()
    if M.rows != M.cols:
        raise ValueError("Lanczos tridiagonalization needs a square operator")
    if opts.check_symmetry:
        _check_symmetric(M)
    proc = _Tridiagonal(M, np.asarray(c, float), opts.reorthogonalize, True, opts.breakdown_tol)
    alphas, gammas = [], []
    broke = False
    for _ in range(min(opts.max_steps, M.rows)):
        a, g, broke = proc.step()
        alphas.append(a)
        gammas.append(g)
        if broke:
            break
    return TridiagFactors(proc.basis.array.copy(), np.array(alphas), np.array(gammas), bool(broke and gammas[-1] == 0.0))


def lanczos_bidiag(A: LinearOperator, b, opts: KrylovOptions | None = None) -> BidiagFactors:
    """Run Golub-Kahan bidiagonalization of ``A`` from ``b``."""
    opts = opts or KrylovOptions()
    proc = _GolubKahan(A, np.asarray(b, float), opts.reorthogonalize, True, opts.breakdown_tol)
    broke = False
    for _ in range(min(opts.max_steps, proc.dim)):
        rho, sigma, broke = proc.step()
        if broke:
            break
    l = len(proc.sigmas) - 1
    early = broke and (proc.sigmas[-1] == 0.0 or proc.rhos[l - 1] == 0.0)
    return BidiagFactors(
        proc.Ub.array[:, :l].copy(),
        proc.Vb.array.copy(),
        np.array(proc.rhos[:l]),
        np.array(proc.sigmas),
        bool(early),
    )


def _ortho_loss(B):
    if B is None or B.shape[1] == 0:
        return None
    nz = np.linalg.norm(B, axis=0) > 0
    B = B[:, nz]
    return float(np.max(np.abs(B.T @ B - np.eye(B.shape[1]))))


def solve_shifted_sym(M: LinearOperator, c, opts: KrylovOptions | None = None):
    """Approximate ``(M + I) y = c`` for symmetric positive semidefinite ``M``.

    Returns ``(y, info)``; ``info.converged`` is false when ``max_steps``
    ran out before the relative residual tolerance was met.
    """
    opts = opts or KrylovOptions()
    if opts.check_symmetry:
        _check_symmetric(M)
    c = np.asarray(c, float)
    store = not opts.low_memory
    reorth = opts.reorthogonalize and store
    proc = _Tridiagonal(M, c, reorth, store, opts.breakdown_tol)
    ls = _ProjectedLS(proc.c_norm)
    alphas, gammas = [], []
    gamma_prev = 0.0
    broke = False
    target = opts.rel_residual_tol * proc.c_norm
    for _ in range(min(opts.max_steps, M.rows)):
        a, g, broke = proc.step()
        alphas.append(a)
        gammas.append(g)
        ls.add_column(a, gamma_prev, g)
        gamma_prev = g
        if ls.residual <= target or broke:
            break
    z = ls.solve()
    if store:
        y = proc.basis.array[:, : len(z)] @ z
        loss = _ortho_loss(proc.basis.array[:, : len(z)])
    else:
        y = _replay_tridiag(M, c / proc.c_norm, alphas, gammas, z)
        loss = None
    info = SolveInfo(len(z), ls.residual, proc.c_norm, ls.residual <= target, broke and gammas[-1] == 0.0,
                     "tridiagonal", loss)
    return y, info


def _replay_tridiag(M, v, alphas, gammas, z):
    y = z[0] * v
    v_prev = np.zeros_like(v)
    g_prev = 0.0
    for j in range(len(z) - 1):
        w = M.forward(v) - alphas[j] * v - g_prev * v_prev
        v_prev, v = v, w / gammas[j]
        g_prev = gammas[j]
        y += z[j + 1] * v
    return y


def _replay_bidiag(A, v, rhos, sigmas, z):
    y = z[0] * v
    u = A.adjoint(v) / rhos[0]
    for j in range(len(z) - 1):
        p = A.forward(u) - rhos[j] * v
        v = p / sigmas[j + 1]
        y += z[j + 1] * v
        if j + 1 < len(z) - 1:
            u = (A.adjoint(v) - sigmas[j + 1] * u) / rhos[j + 1]
    return y


def solve_shifted_normal(A: LinearOperator, c, opts: KrylovOptions | None = None):
    """Approximate ``(A A^T + I) y = c`` through bidiagonalization of ``A``.

    The tridiagonal entries are read off ``C C^T`` so ``A A^T`` is never
    formed. Returns ``(y, info)``.
    """
    opts = opts or KrylovOptions()
    c = np.asarray(c, float)
    store = not opts.low_memory
    reorth = opts.reorthogonalize and store
    proc = _GolubKahan(A, c, reorth, store, opts.breakdown_tol)
    ls = _ProjectedLS(proc.sigmas[0])
    target = opts.rel_residual_tol * proc.sigmas[0]
    gamma_prev = 0.0
    sub_prev = 0.0
    broke = False
    for _ in range(min(opts.max_steps, proc.dim)):
        rho, sigma, broke = proc.step()
        alpha_t = rho * rho + sub_prev * sub_prev
        gamma = rho * sigma
        ls.add_column(alpha_t, gamma_prev, gamma)
        gamma_prev, sub_prev = gamma, sigma
        if ls.residual <= target or broke:
            break
    z = ls.solve()
    if store:
        y = proc.Vb.array[:, : len(z)] @ z
        loss = _ortho_loss(proc.Vb.array[:, : len(z)])
    else:
        y = _replay_bidiag(A, c / proc.sigmas[0], proc.rhos, proc.sigmas, z)
        loss = None
    info = SolveInfo(len(z), ls.residual, proc.sigmas[0], ls.residual <= target, bool(broke and gamma_prev == 0.0),
                     "bidiagonal", loss)
    return y, info


def solve_tikhonov_standard(A: LinearOperator, b, opts: KrylovOptions | None = None):
    """Minimize ``||A xi - b||^2 + ||xi||^2``.

    With fewer rows than columns the ``m x m`` Wiener system
    ``(A A^T + I) zeta = b`` is solved and ``xi = A^T zeta`` is returned;
    otherwise the Tikhonov system ``(A^T A + I) xi = A^T b`` is solved
    directly. ``info.path`` names the branch taken.
    """
    opts = opts or KrylovOptions()
    b = np.asarray(b, float)
    if not np.any(b):
        raise ZeroStartError("data vector is zero")
    if A.rows < A.cols:
        zeta, info = solve_shifted_normal(A, b, opts)
        info.path = "wiener"
        return A.adjoint(zeta), info
    rhs = A.adjoint(b)
    if not np.any(rhs):
        return np.zeros(A.cols), SolveInfo(0, 0.0, 0.0, True, True, "tikhonov")
    xi, info = solve_shifted_normal(A.T, rhs, opts)
    info.path = "tikhonov"
    return xi, info
