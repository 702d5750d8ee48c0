"""Sparsifying operators, row partitions and the implicit pseudoinverse of L_theta.

``L`` is kept as a scipy sparse matrix. Rows are grouped by a
:class:`Partition`; scaling by ``theta`` divides every row by the square
root of its group's variance. The pseudoinverse of the scaled operator is
applied through the normal equations ``(L_theta^T L_theta) x = L_theta^T xi``
with a sparse LU factorization of the Gram matrix, refreshed for every new
``theta``. A dense QR comparator is provided for timing and cross-checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import qr, solve_triangular

from .operators import LinearOperator, sparse as sparse_op

L_KINDS = ("identity", "diff1", "diff2", "grid_incidence")


class RankDeficiencyError(ValueError):
    """L (or its Gram matrix) is numerically rank deficient."""


class QrCapExceeded(MemoryError):
    """The dense QR comparator refused to materialize a large operator."""


@dataclass(frozen=True)
class Partition:
    """Disjoint grouping of the row indices ``0..k-1`` of ``L``.

    Indices are zero-based in memory and one-based in JSON files.
    """

    groups: tuple
    k: int
    group_of: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_groups(cls, groups, k=None, one_based=False):
        arrs = [np.asarray(g, dtype=np.int64) - (1 if one_based else 0) for g in groups]
        if k is None:
            k = int(sum(a.size for a in arrs))
        owner = np.full(k, -1, dtype=np.int64)
        for i, a in enumerate(arrs):
            if a.size == 0:
                raise ValueError(f"group {i} is empty")
            if a.min() < 0 or a.max() >= k:
                raise ValueError(f"group {i} has indices outside 0..{k - 1}")
            if np.any(owner[a] >= 0) or np.unique(a).size != a.size:
                raise ValueError(f"group {i} overlaps another group")
            owner[a] = i
        if np.any(owner < 0):
            missing = np.flatnonzero(owner < 0)[:5]
            raise ValueError(f"partition does not cover rows {missing.tolist()}...")
        return cls(tuple(arrs), k, owner)

    @classmethod
    def componentwise(cls, k):
        return cls.from_groups([[i] for i in range(k)], k)

    @classmethod
    def trivial(cls, k):
        return cls.from_groups([np.arange(k)], k)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([g.size for g in self.groups])

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_norms(self, z) -> np.ndarray:
        """Euclidean norm of ``z`` restricted to each group."""
        return np.sqrt(np.bincount(self.group_of, weights=np.asarray(z) ** 2, minlength=self.n_groups))

    def expand(self, values) -> np.ndarray:
        """Broadcast per-group values to per-row values."""
        return np.asarray(values, float)[self.group_of]

    def to_json(self) -> str:
        return json.dumps([(g + 1).tolist() for g in self.groups])

    @classmethod
    def from_json(cls, text, k=None):
        return cls.from_groups(json.loads(text), k, one_based=True)


def _resolve_partition(partition, k):
    if partition is None or partition == "componentwise":
        return Partition.componentwise(k)
    if partition == "trivial":
        return Partition.trivial(k)
    if isinstance(partition, Partition):
        if partition.k != k:
            raise ValueError(f"partition covers {partition.k} rows but L has {k}")
        return partition
    return Partition.from_groups(partition, k)


class _GramSolver:
    """Solves ``L^T W L x = y`` for a diagonal row weighting ``W``."""

    def __init__(self, L: sp.csr_matrix, weights, method="lu", cg_tol=1e-10):
        G = (L.T @ sp.diags(weights) @ L).tocsc()
        self.method = method
        self.n = G.shape[0]
        if method == "lu":
            try:
                self.lu = spla.splu(G, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                    options=dict(SymmetricMode=True))
            except RuntimeError as exc:
                raise RankDeficiencyError(f"Gram matrix factorization failed: {exc}") from exc
            d = np.abs(self.lu.U.diagonal())
            if d.min() <= 1e-13 * d.max():
                raise RankDeficiencyError(f"Gram matrix is numerically singular (pivot ratio {d.min() / d.max():.2e})")
        elif method == "cg":
            self.G = G
            self.cg_tol = cg_tol
        else:
            raise ValueError(f"unknown gram solver {method!r}")

    def solve(self, y):
        if self.method == "lu":
            return self.lu.solve(np.asarray(y, float))
        x, info = spla.cg(self.G, y, rtol=self.cg_tol, atol=0.0, maxiter=10 * self.n)
        if info != 0:
            raise RankDeficiencyError(f"conjugate gradients did not converge on the Gram system (info={info})")
        return x


class SparsifyingOperator:
    """Sparse ``L`` (k x n, k >= n, full column rank) together with its row partition."""

    def __init__(self, L, partition=None, gram_solver="lu", kind="custom"):
        L = sp.csr_matrix(L, dtype=float)
        k, n = L.shape
        if k < n:
            raise ValueError(f"L must have at least as many rows as columns, got {k}x{n}")
        self.L = L
        self.kind = kind
        self.partition = _resolve_partition(partition, k)
        self.gram_solver = gram_solver
        self.op = sparse_op(L)
        # rank check: the unweighted Gram matrix must factor
        _GramSolver(L, np.ones(k), "lu" if gram_solver == "lu" else "cg")

    @property
    def shape(self):
        return self.L.shape

    def __repr__(self):
        k, n = self.shape
        return f"SparsifyingOperator(kind={self.kind!r}, {k}x{n}, groups={self.partition.n_groups})"


class ScaledOperator(LinearOperator):
    """``L_theta = D_theta^{-1/2} L``; the Gram factorization is built on first use."""

    def __init__(self, base: SparsifyingOperator, theta):
        theta = np.asarray(theta, float)
        part = base.partition
        if theta.shape != (part.n_groups,):
            raise ValueError(f"theta has length {theta.size}, expected {part.n_groups} groups")
        bad = np.flatnonzero(~(theta > 0))
        if bad.size:
            raise ValueError(f"theta must be positive; group {bad[0]} has {theta[bad[0]]}")
        self.base = base
        self.theta = theta
        self.row_scale = 1.0 / np.sqrt(part.expand(theta))
        L = base.L
        s = self.row_scale
        super().__init__(L.shape[0], L.shape[1], lambda x: s * (L @ x), lambda w: L.T @ (s * w), kind="scaled")
        self._gram = None

    @property
    def gram(self) -> _GramSolver:
        if self._gram is None:
            self._gram = _GramSolver(self.base.L, self.row_scale**2, self.base.gram_solver)
        return self._gram

    def todense(self):
        return self.row_scale[:, None] * self.base.L.toarray()

    def pinv(self) -> LinearOperator:
        """``L_theta^dagger`` as a k -> n operator (applied implicitly)."""
        return LinearOperator(self.cols, self.rows, lambda xi: pinv_apply(self, xi),
                              lambda y: pinv_adjoint_apply(self, y), kind="composed")


def build_L(kind: str, n: int | None = None, shape=None, mask=None, partition=None,
            gram_solver="lu") -> SparsifyingOperator:
    """Construct a standard sparsifying operator.

    Parameters
    ----------
    kind : {'identity', 'diff1', 'diff2', 'grid_incidence'}
    n : int
        Number of unknowns (ignored for ``grid_incidence``).
    shape : tuple of int, optional
        ``(ny, nx)`` node grid for ``grid_incidence``.
    mask : ndarray of bool, optional
        Nodes kept as unknowns for ``grid_incidence``; the rest are treated
        as eliminated boundary nodes fixed at zero. Defaults to every node
        except the outer ring.
    partition : Partition, 'componentwise', 'trivial' or list, optional
        Grouping of the rows; componentwise by default.

    Returns
    -------
    SparsifyingOperator
    """
    if kind == "identity":
        L = sp.identity(_need_n(n, 1), format="csr")
    elif kind == "diff1":
        n = _need_n(n, 2)
        D = sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n))
        anchor = sp.csr_matrix(([1.0], ([0], [0])), shape=(1, n))
        L = sp.vstack([D, anchor])
    elif kind == "diff2":
        n = _need_n(n, 2)
        L = sp.diags([np.ones(n - 1), -2 * np.ones(n), np.ones(n - 1)], [-1, 0, 1])
    elif kind == "grid_incidence":
        L = grid_incidence(shape, mask)
    else:
        raise ValueError(f"unknown L kind {kind!r}; expected one of {L_KINDS}")
    return SparsifyingOperator(L, partition, gram_solver, kind)


def _need_n(n, least):
    if n is None or n < least:
        raise ValueError(f"n must be at least {least}, got {n}")
    return int(n)


def grid_incidence(shape, mask=None) -> sp.csr_matrix:
    """Edge-increment matrix of a 4-neighbour node grid with masked nodes eliminated.

    Unknowns are the ``True`` entries of ``mask`` in row-major order. Every
    horizontal or vertical edge with at least one unknown endpoint gives one
    row ``x[head] - x[tail]``; an eliminated endpoint simply drops its entry.
    """
    if shape is None:
        raise ValueError("grid_incidence needs a grid shape")
    ny, nx = shape
    if mask is None:
        mask = np.zeros((ny, nx), bool)
        mask[1:-1, 1:-1] = True
    mask = np.asarray(mask, bool)
    if mask.shape != (ny, nx):
        raise ValueError(f"mask shape {mask.shape} does not match grid {shape}")
    index = np.full(mask.shape, -1, dtype=np.int64)
    index[mask] = np.arange(mask.sum())
    tails = np.concatenate([index[:, :-1].ravel(), index[:-1, :].ravel()])
    heads = np.concatenate([index[:, 1:].ravel(), index[1:, :].ravel()])
    keep = (tails >= 0) | (heads >= 0)
    tails, heads = tails[keep], heads[keep]
    rows = np.arange(tails.size)
    t_ok, h_ok = tails >= 0, heads >= 0
    r = np.concatenate([rows[t_ok], rows[h_ok]])
    c = np.concatenate([tails[t_ok], heads[h_ok]])
    v = np.concatenate([-np.ones(t_ok.sum()), np.ones(h_ok.sum())])
    return sp.csr_matrix((v, (r, c)), shape=(tails.size, int(mask.sum())))


def scale_by_theta(Lop: SparsifyingOperator, theta) -> ScaledOperator:
    """Divide every row of ``L`` by the square root of its group's variance."""
    return ScaledOperator(Lop, theta)


def pinv_apply(Lt: ScaledOperator, xi):
    """``x = L_theta^dagger xi`` via the normal equations."""
    xi = np.asarray(xi, float)
    return Lt.gram.solve(Lt.adjoint(xi))


def pinv_adjoint_apply(Lt: ScaledOperator, y):
    """``zeta = (L_theta^dagger)^T y = L_theta (L_theta^T L_theta)^{-1} y``."""
    y = np.asarray(y, float)
    if y.shape != (Lt.cols,):
        raise ValueError(f"expected a vector of length {Lt.cols}, got {y.shape}")
    return Lt.forward(Lt.gram.solve(y))


class QrPinv:
    """Dense ``L_theta^dagger = R^{-1} Q^T`` from a reduced QR factorization."""

    def __init__(self, Lt: ScaledOperator):
        self.Q, self.R = qr(Lt.todense(), mode="economic")

    def apply(self, xi):
        return solve_triangular(self.R, self.Q.T @ xi)

    def apply_adjoint(self, y):
        return self.Q @ solve_triangular(self.R, y, trans="T")

    def as_operator(self) -> LinearOperator:
        k, n = self.Q.shape
        return LinearOperator(n, k, self.apply, self.apply_adjoint, kind="composed")


def pinv_via_qr(Lt: ScaledOperator, cap: float = 2e7) -> QrPinv:
    """Explicit QR-based pseudoinverse; refuses operators with ``k*n > cap``."""
    k, n = Lt.shape
    if k * n > cap:
        raise QrCapExceeded(f"dense QR of a {k}x{n} operator exceeds the cap of {cap:g} entries")
    return QrPinv(Lt)


def export_L(Lop: SparsifyingOperator, directory) -> None:
    """Write ``L.mtx`` and ``partition.json`` into ``directory``."""
    from scipy.io import mmwrite

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    mmwrite(str(d / "L.mtx"), Lop.L)
    (d / "partition.json").write_text(Lop.partition.to_json())


def load_L(directory, gram_solver="lu") -> SparsifyingOperator:
    from scipy.io import mmread

    d = Path(directory)
    L = sp.csr_matrix(mmread(str(d / "L.mtx")))
    pfile = d / "partition.json"
    part = Partition.from_json(pfile.read_text(), L.shape[0]) if pfile.exists() else None
    return SparsifyingOperator(L, part, gram_solver)
