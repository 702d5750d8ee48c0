"""Matrix-free linear operators.

Every solver in the package touches matrices only through
:class:`LinearOperator`: a forward map, an adjoint map and the two
dimensions. Dense and sparse matrices are wrapped so that they can still be
materialized cheaply when an exact answer is wanted (Frobenius norms,
column norms, test oracles).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp

KINDS = ("dense", "sparse-triplet", "composed", "scaled", "whitened")


class DimensionError(ValueError):
    """Vector length does not match the operator dimension."""


class LinearOperator:
    """A linear map ``R^cols -> R^rows`` given by its forward and adjoint action.

    Parameters
    ----------
    rows, cols : int
        Output and input dimensions.
    forward : callable
        ``v -> A v`` for ``v`` of length ``cols``.
    adjoint : callable
        ``w -> A^T w`` for ``w`` of length ``rows``.
    kind : str
        One of ``dense``, ``sparse-triplet``, ``composed``, ``scaled``,
        ``whitened``.
    matrix : ndarray or scipy sparse matrix, optional
        Explicit matrix, kept for materializable kinds.
    """

    def __init__(
        self,
        rows: int,
        cols: int,
        forward: Callable[[np.ndarray], np.ndarray],
        adjoint: Callable[[np.ndarray], np.ndarray],
        kind: str = "composed",
        matrix=None,
    ):
        if rows < 1 or cols < 1:
            raise ValueError(f"operator dimensions must be positive, got {rows}x{cols}")
        if kind not in KINDS:
            raise ValueError(f"unknown operator kind {kind!r}")
        self.rows = int(rows)
        self.cols = int(cols)
        self._forward = forward
        self._adjoint = adjoint
        self.kind = kind
        self.matrix = matrix

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def materializable(self) -> bool:
        return self.matrix is not None

    def forward(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.cols,):
            raise DimensionError(
                f"forward expects a vector of length {self.cols}, got shape {v.shape}"
            )
        return np.asarray(self._forward(v), dtype=float).reshape(self.rows)

    def adjoint(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.rows,):
            raise DimensionError(
                f"adjoint expects a vector of length {self.rows}, got shape {w.shape}"
            )
        return np.asarray(self._adjoint(w), dtype=float).reshape(self.cols)

    @property
    def T(self) -> "LinearOperator":
        """The adjoint as an operator of its own."""
        mat = None if self.matrix is None else self.matrix.T
        return LinearOperator(self.cols, self.rows, self._adjoint, self._forward, self.kind, mat)

    def __matmul__(self, other):
        if isinstance(other, LinearOperator):
            return compose(self, other)
        return self.forward(other)

    def todense(self) -> np.ndarray:
        """Explicit matrix; matrix-free kinds are probed column by column."""
        if self.matrix is not None:
            if sp.issparse(self.matrix):
                return self.matrix.toarray()
            return np.array(self.matrix, dtype=float)
        out = np.empty((self.rows, self.cols))
        e = np.zeros(self.cols)
        for j in range(self.cols):
            e[j] = 1.0
            out[:, j] = self.forward(e)
            e[j] = 0.0
        return out

    def __repr__(self):
        return f"LinearOperator({self.rows}x{self.cols}, kind={self.kind!r})"


def apply(op: LinearOperator, v) -> np.ndarray:
    """Forward application ``op @ v`` with a dimension check."""
    return op.forward(v)


def apply_adjoint(op: LinearOperator, w) -> np.ndarray:
    """Adjoint application ``op^T @ w`` with a dimension check."""
    return op.adjoint(w)


def dense(matrix) -> LinearOperator:
    M = np.array(matrix, dtype=float)
    if M.ndim != 2:
        raise ValueError("dense operator needs a 2-D array")
    return LinearOperator(M.shape[0], M.shape[1], M.__matmul__, M.T.__matmul__, "dense", M)


def sparse(matrix) -> LinearOperator:
    """Wrap a scipy sparse matrix (any format) as a ``sparse-triplet`` operator."""
    csr = sp.csr_matrix(matrix, dtype=float)
    csc = csr.tocsc()
    # adjoint through the transpose of the CSC copy keeps both products row-major
    csr_t = csc.T.tocsr()
    return LinearOperator(
        csr.shape[0], csr.shape[1], csr.__matmul__, csr_t.__matmul__, "sparse-triplet", csr
    )


def from_triplets(rows: int, cols: int, i, j, values) -> LinearOperator:
    """Sparse operator from coordinate triplets; duplicates are summed."""
    coo = sp.coo_matrix((np.asarray(values, float), (np.asarray(i), np.asarray(j))), shape=(rows, cols))
    return sparse(coo)


def identity(n: int) -> LinearOperator:
    return sparse(sp.identity(n, format="csr"))


def zero(rows: int, cols: int) -> LinearOperator:
    return sparse(sp.csr_matrix((rows, cols)))


def aslinearoperator(obj) -> LinearOperator:
    if isinstance(obj, LinearOperator):
        return obj
    if sp.issparse(obj):
        return sparse(obj)
    return dense(obj)


def compose(A: LinearOperator, B: LinearOperator) -> LinearOperator:
    """``A o B``; never materialized."""
    if A.cols != B.rows:
        raise DimensionError(f"cannot compose {A.rows}x{A.cols} with {B.rows}x{B.cols}")
    return LinearOperator(
        A.rows,
        B.cols,
        lambda v: A.forward(B.forward(v)),
        lambda w: B.adjoint(A.adjoint(w)),
        "composed",
    )


def scaled(A: LinearOperator, c: float) -> LinearOperator:
    c = float(c)
    mat = None if A.matrix is None else A.matrix * c
    return LinearOperator(
        A.rows, A.cols, lambda v: c * A.forward(v), lambda w: c * A.adjoint(w), "scaled", mat
    )


# ---------------------------------------------------------------------------
# noise and whitening


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian noise description: iid scalar, diagonal or full covariance."""

    variant: str
    sigma: float | None = None
    variances: np.ndarray | None = field(default=None, repr=False)
    covariance: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.variant == "iid":
            if self.sigma is None or not self.sigma > 0:
                raise ValueError("iid noise needs a positive standard deviation")
        elif self.variant == "diagonal":
            v = np.asarray(self.variances, float)
            if v.ndim != 1 or np.any(v <= 0):
                raise ValueError("diagonal noise variances must be strictly positive")
        elif self.variant == "full":
            C = np.asarray(self.covariance, float)
            if C.ndim != 2 or C.shape[0] != C.shape[1]:
                raise ValueError("full noise covariance must be a square matrix")
            if np.max(np.abs(C - C.T)) > 1e-12 * max(1.0, np.max(np.abs(C))):
                raise ValueError("full noise covariance must be symmetric")
            if np.any(np.diag(C) <= 0):
                raise ValueError("noise variances must be strictly positive")
        else:
            raise ValueError(f"unknown noise variant {self.variant!r}")

    @classmethod
    def iid(cls, sigma: float) -> "NoiseModel":
        return cls("iid", sigma=float(sigma))

    @classmethod
    def diagonal(cls, variances) -> "NoiseModel":
        return cls("diagonal", variances=np.asarray(variances, float))

    @classmethod
    def full(cls, covariance) -> "NoiseModel":
        return cls("full", covariance=np.asarray(covariance, float))

    def rms_sigma(self, m: int) -> float:
        if self.variant == "iid":
            return self.sigma
        if self.variant == "diagonal":
            return math.sqrt(float(np.mean(self.variances)))
        return math.sqrt(float(np.trace(self.covariance)) / m)


class FactorizationError(np.linalg.LinAlgError):
    pass


def whiten(A: LinearOperator, b, noise: NoiseModel):
    """Return ``(S A, S b, sigma_eff)`` with ``S^T S`` the noise precision.

    For iid noise ``S = I / sigma`` and ``sigma_eff = sigma``; otherwise
    ``sigma_eff`` is the RMS noise standard deviation. For a full covariance
    ``Sigma = C C^T`` (Cholesky) and ``S = C^{-1}``.
    """
    b = np.asarray(b, float)
    if b.shape != (A.rows,):
        raise DimensionError(f"data has length {b.size}, operator has {A.rows} rows")
    if noise.variant == "iid":
        s = 1.0 / noise.sigma
        fwd = lambda v: s * A.forward(v)  # noqa: E731
        adj = lambda w: s * A.adjoint(w)  # noqa: E731
        bw = s * b
        mat = None if A.matrix is None else A.matrix * s
    elif noise.variant == "diagonal":
        if noise.variances.shape != (A.rows,):
            raise DimensionError("noise variances do not match the data length")
        s = 1.0 / np.sqrt(noise.variances)
        fwd = lambda v: s * A.forward(v)  # noqa: E731
        adj = lambda w: A.adjoint(s * w)  # noqa: E731
        bw = s * b
        mat = None
        if A.matrix is not None:
            mat = sp.diags(s) @ A.matrix if sp.issparse(A.matrix) else s[:, None] * A.matrix
    else:
        C = noise.covariance
        if C.shape != (A.rows, A.rows):
            raise DimensionError("noise covariance does not match the data length")
        try:
            chol = scipy.linalg.cholesky(C, lower=True)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(f"noise covariance is not positive definite: {exc}") from exc
        solve = lambda y: scipy.linalg.solve_triangular(chol, y, lower=True)  # noqa: E731
        solve_t = lambda y: scipy.linalg.solve_triangular(chol, y, lower=True, trans="T")  # noqa: E731
        fwd = lambda v: solve(A.forward(v))  # noqa: E731
        adj = lambda w: A.adjoint(solve_t(w))  # noqa: E731
        bw = solve(b)
        mat = None
    op = LinearOperator(A.rows, A.cols, fwd, adj, "whitened", mat)
    return op, bw, noise.rms_sigma(A.rows)


# ---------------------------------------------------------------------------
# norms


@dataclass(frozen=True)
class NormEstimate:
    value: float
    stderr: float
    exact: bool


def frobenius_norm_sq(op: LinearOperator, probes: int = 100, rng=None, exact: bool | None = None) -> NormEstimate:
    """Squared Frobenius norm ``trace(A A^T)``.

    Materializable operators are summed exactly. Matrix-free operators use a
    Rademacher-probe trace estimator ``mean ||A w||^2`` with the standard
    error of the mean, unless ``exact=True`` forces column probing
    (``cols`` forward applications).
    """
    if exact is None:
        exact = op.materializable
    if exact:
        if op.matrix is not None:
            M = op.matrix
            val = float(M.multiply(M).sum()) if sp.issparse(M) else float(np.sum(M * M))
        else:
            val = float(np.sum(column_norms(op) ** 2))
        return NormEstimate(val, 0.0, True)
    rng = np.random.default_rng(rng)
    samples = np.empty(probes)
    for i in range(probes):
        w = rng.choice((-1.0, 1.0), size=op.cols)
        y = op.forward(w)
        samples[i] = np.dot(y, y)
    stderr = float(samples.std(ddof=1) / math.sqrt(probes)) if probes > 1 else float("inf")
    return NormEstimate(float(samples.mean()), stderr, False)


def column_norms(op: LinearOperator) -> np.ndarray:
    """Euclidean norm of every column ``||A e_j||``."""
    if op.matrix is not None:
        M = op.matrix
        if sp.issparse(M):
            return np.sqrt(np.asarray(M.multiply(M).sum(axis=0)).ravel())
        return np.sqrt(np.sum(np.asarray(M) ** 2, axis=0))
    out = np.empty(op.cols)
    e = np.zeros(op.cols)
    for j in range(op.cols):
        e[j] = 1.0
        out[j] = np.linalg.norm(op.forward(e))
        e[j] = 0.0
    return out


# ---------------------------------------------------------------------------
# file formats


def read_matrix_market(path) -> LinearOperator:
    return sparse(scipy.io.mmread(str(path)))


def write_matrix_market(path, op) -> None:
    M = op.matrix if isinstance(op, LinearOperator) else op
    if M is None:
        M = sp.csr_matrix(op.todense())
    scipy.io.mmwrite(str(path), sp.coo_matrix(M), precision=17)


def read_csv(path) -> np.ndarray:
    """Dense matrix or vector from comma-separated text; one row per line."""
    data = np.loadtxt(Path(path), delimiter=",", ndmin=2)
    if data.shape[1] == 1 or data.shape[0] == 1:
        return data.ravel()
    return data


def write_csv(path, array) -> None:
    arr = np.asarray(array, float)
    if arr.ndim == 1:
        arr = arr[:, None]
    np.savetxt(Path(path), arr, delimiter=",", fmt="%.17g")
