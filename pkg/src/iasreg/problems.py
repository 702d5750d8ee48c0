"""Test problems: numerical differentiation and fan-beam tomography on a pixel grid."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import erf

from .operators import LinearOperator, dense, read_csv, read_matrix_market, sparse, write_csv, write_matrix_market
from .regularizer import SparsifyingOperator, build_L

BUNDLE_VERSION = 1


@dataclass
class Problem:
    """Forward operator, data and noise level of a linear inverse problem.

    ``b0`` (noiseless data) and ``x_true`` are only known for synthetic
    problems and are used for testing and error reporting.
    """

    A: LinearOperator
    b: np.ndarray
    sigma: float
    b0: np.ndarray | None = None
    x_true: np.ndarray | None = None
    whitened_data: bool = False
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.b = np.asarray(self.b, float)
        if self.b.shape != (self.A.rows,):
            raise ValueError(f"b has length {self.b.size}, A has {self.A.rows} rows")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def m(self) -> int:
        return self.A.rows

    @property
    def n(self) -> int:
        return self.A.cols

    def whitened(self) -> "Problem":
        """Same problem divided by ``sigma`` so the noise has unit variance."""
        if self.whitened_data:
            return self
        s = self.sigma
        if self.A.materializable:
            mat = self.A.matrix / s
            A = sparse(mat) if sp.issparse(mat) else dense(mat)
        else:
            base = self.A
            A = LinearOperator(base.rows, base.cols, lambda v: base.forward(v) / s,
                               lambda w: base.adjoint(w) / s, kind="whitened")
        b0 = None if self.b0 is None else self.b0 / s
        meta = dict(self.metadata, sigma_raw=s)
        return replace(self, A=A, b=self.b / s, b0=b0, sigma=1.0, whitened_data=True, metadata=meta)

    def default_L(self, partition=None, gram_solver="lu") -> SparsifyingOperator:
        spec = self.metadata.get("default_L")
        if spec is None:
            raise ValueError("problem carries no default sparsifying operator")
        if spec["kind"] == "grid_incidence":
            mask = np.asarray(self.metadata["mask"], bool)
            return build_L("grid_incidence", shape=mask.shape, mask=mask, partition=partition,
                           gram_solver=gram_solver)
        return build_L(spec["kind"], n=self.n, partition=partition, gram_solver=gram_solver)


# ---------------------------------------------------------------------------
# numerical differentiation


def numdiff_signal(t):
    """``u(t) = 1 + erf(6t - 3)`` and its derivative."""
    t = np.asarray(t, float)
    return 1 + erf(6 * t - 3), 12 / np.sqrt(np.pi) * np.exp(-((6 * t - 3) ** 2))


def make_numdiff(n: int = 50, sigma_rel: float = 0.01, seed=0) -> Problem:
    """Recover ``u'`` from noisy samples of ``u`` on ``t_j = j/n``.

    ``A`` is the rectangle-rule integration matrix ``tril(ones)/n``. The
    noise standard deviation is ``sigma = sigma_rel ||b0|| / sqrt(n)``, and
    the unit normal noise vector depends only on ``seed``, so sweeping
    ``sigma_rel`` with a fixed seed rescales one noise realization.
    ``sigma_rel = 0`` returns exact data with a nominal ``sigma`` of 1.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    if not 0 <= sigma_rel < 1:
        raise ValueError("sigma_rel must lie in [0, 1)")
    t = np.arange(1, n + 1) / n
    A = np.tril(np.ones((n, n))) / n
    b0, x_true = numdiff_signal(t)
    sigma = np.sqrt(b0 @ b0 / n) * sigma_rel
    w = np.random.default_rng(seed).standard_normal(n)
    b = b0 + sigma * w
    meta = {"name": "numdiff", "n": n, "m": n, "sigma_rel": sigma_rel, "seed": seed,
            "default_L": {"kind": "diff2"}}
    return Problem(dense(A), b, sigma if sigma > 0 else 1.0, b0, x_true, False, meta)


# ---------------------------------------------------------------------------
# tomography geometry


@dataclass(frozen=True)
class Disk:
    center: tuple
    radius: float
    density: float

    def chords(self, S, d):
        """Chord lengths for rays ``S + s d`` (rows of ``S``, unit ``d``)."""
        c = np.asarray(self.center)
        rel = c - S
        along = np.einsum("ij,ij->i", rel, d)
        dist2 = np.einsum("ij,ij->i", rel, rel) - along**2
        return 2 * np.sqrt(np.clip(self.radius**2 - dist2, 0, None))

    def contains(self, px, py):
        return (px - self.center[0]) ** 2 + (py - self.center[1]) ** 2 < self.radius**2


@dataclass(frozen=True)
class Polygon:
    vertices: np.ndarray
    density: float

    def chords(self, S, d):
        """Length of each ray inside the polygon (even-odd rule)."""
        P = self.vertices
        E = np.roll(P, -1, axis=0) - P
        out = np.zeros(len(S))
        for i, (s0, di) in enumerate(zip(S, d)):
            # solve s0 + s di = P + u E
            den = di[0] * E[:, 1] - di[1] * E[:, 0]
            rel = P - s0
            ok = np.abs(den) > 1e-300
            with np.errstate(divide="ignore", invalid="ignore"):
                s = (rel[:, 0] * E[:, 1] - rel[:, 1] * E[:, 0]) / den
                u = (rel[:, 0] * di[1] - rel[:, 1] * di[0]) / den
            hit = ok & (u >= 0) & (u < 1)
            ss = np.sort(s[hit])
            if ss.size >= 2:
                out[i] = np.sum(ss[1::2][: ss.size // 2] - ss[0::2][: ss.size // 2])
        return out

    def contains(self, px, py):
        # even-odd rule, one horizontal scanline per distinct y
        P = self.vertices
        Q = np.roll(P, -1, axis=0)
        fx, fy = np.ravel(px), np.ravel(py)
        flat = np.zeros(fx.shape, bool)
        ys, inv = np.unique(fy, return_inverse=True)
        for i, y in enumerate(ys):
            straddle = (P[:, 1] > y) != (Q[:, 1] > y)
            a, b = P[straddle], Q[straddle]
            xcross = np.sort(a[:, 0] + (y - a[:, 1]) * (b[:, 0] - a[:, 0]) / (b[:, 1] - a[:, 1]))
            sel = inv == i
            flat[sel] = np.searchsorted(xcross, fx[sel]) % 2 == 1
        return flat.reshape(np.shape(px))


def kite(center=(-0.35, 0.3), scale=0.25, density=1.2, n_vertices=4096) -> Polygon:
    s = np.linspace(0, 2 * np.pi, n_vertices, endpoint=False)
    x = np.cos(s) + 0.65 * np.cos(2 * s) - 0.65
    y = 1.5 * np.sin(s)
    return Polygon(np.column_stack([center[0] + scale * x, center[1] + scale * y]), density)


@dataclass
class Phantom:
    """Piecewise-constant density made of inclusions on a zero background."""

    inclusions: list

    @classmethod
    def default(cls):
        return cls([kite(), Disk((0.4, -0.35), 0.25, 1.0)])

    @classmethod
    def uniform(cls, density=1.0):
        return cls([Disk((0.0, 0.0), 1.0, density)])

    def line_integrals(self, S, d):
        return sum(inc.density * inc.chords(S, d) for inc in self.inclusions)

    def pixel_values(self, shape, supersample=8):
        """Pixel averages over the ``[-1, 1]^2`` grid; also returns per-inclusion coverage."""
        ny, nx = shape
        off = (np.arange(supersample) + 0.5) / supersample
        xs = -1 + (np.arange(nx)[:, None] + off[None, :]).ravel() * (2 / nx)
        ys = -1 + (np.arange(ny)[:, None] + off[None, :]).ravel() * (2 / ny)
        PX, PY = np.meshgrid(xs, ys)
        vals = np.zeros(PX.shape)
        cover = []
        for inc in self.inclusions:
            inside = inc.contains(PX, PY)
            vals[inside] = inc.density
            cover.append(inside.reshape(ny, supersample, nx, supersample).mean(axis=(1, 3)))
        return vals.reshape(ny, supersample, nx, supersample).mean(axis=(1, 3)), cover


def fan_geometry(n_rays: int, n_views: int, source_radius: float = 2.0, domain_radius: float = 1.0):
    """Sources and unit directions of a fan-beam scan of the centred disk.

    The fan's half-angle is ``asin(domain_radius / source_radius)``, so the
    fan just covers the domain; rays sit at the midpoints of equal angular
    bins and none is tangent to it.
    """
    half = np.arcsin(domain_radius / source_radius)
    psi = -half + (np.arange(n_rays) + 0.5) * (2 * half / n_rays)
    phis = 2 * np.pi * np.arange(n_views) / n_views
    S, D = [], []
    for phi in phis:
        src = source_radius * np.array([np.cos(phi), np.sin(phi)])
        base = phi + np.pi
        ang = base + psi
        S.append(np.tile(src, (n_rays, 1)))
        D.append(np.column_stack([np.cos(ang), np.sin(ang)]))
    return np.vstack(S), np.vstack(D)


def _trace_one(s0, d, nx, ny):
    dx, dy = 2 / nx, 2 / ny
    # slab clipping against [-1, 1]^2
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t1 = (np.array([-1.0, -1.0]) - s0) / d
        t2 = (np.array([1.0, 1.0]) - s0) / d
    tmin = np.where(d == 0, np.where(np.abs(s0) <= 1, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(d == 0, np.where(np.abs(s0) <= 1, np.inf, -np.inf), np.maximum(t1, t2))
    s_in, s_out = max(tmin.max(), 0.0), tmax.min()
    if not s_out > s_in:
        return np.empty(0, int), np.empty(0, int), np.empty(0)
    cuts = [np.array([s_in, s_out])]
    if d[0] != 0:
        cuts.append((-1 + dx * np.arange(nx + 1) - s0[0]) / d[0])
    if d[1] != 0:
        cuts.append((-1 + dy * np.arange(ny + 1) - s0[1]) / d[1])
    s = np.concatenate(cuts)
    s = np.unique(s[(s >= s_in) & (s <= s_out)])
    lengths = np.diff(s)
    mid = 0.5 * (s[:-1] + s[1:])
    ix = np.clip(np.floor((s0[0] + mid * d[0] + 1) / dx).astype(int), 0, nx - 1)
    iy = np.clip(np.floor((s0[1] + mid * d[1] + 1) / dy).astype(int), 0, ny - 1)
    keep = lengths > 1e-14
    return iy[keep], ix[keep], lengths[keep]


def trace_rays(S, D, shape, mask=None) -> sp.csr_matrix:
    """Ray-pixel intersection lengths on the ``[-1, 1]^2`` grid of ``shape = (ny, nx)``.

    Columns are the ``True`` pixels of ``mask`` in row-major order; lengths
    in masked-out pixels are discarded.
    """
    ny, nx = shape
    if mask is None:
        mask = np.ones(shape, bool)
    index = np.full(shape, -1, dtype=np.int64)
    index[mask] = np.arange(int(mask.sum()))
    rows, cols, vals = [], [], []
    for i, (s0, d) in enumerate(zip(np.asarray(S, float), np.asarray(D, float))):
        d = d / np.linalg.norm(d)
        iy, ix, ln = _trace_one(s0, d, nx, ny)
        c = index[iy, ix]
        ok = c >= 0
        rows.append(np.full(ok.sum(), i))
        cols.append(c[ok])
        vals.append(ln[ok])
    r, c, v = (np.concatenate(a) if a else np.empty(0) for a in (rows, cols, vals))
    A = sp.coo_matrix((v, (r.astype(int), c.astype(int))), shape=(len(S), int(mask.sum())))
    return A.tocsr()


def disk_mask(shape):
    """Pixels whose centres lie inside the unit disk."""
    ny, nx = shape
    xc = -1 + (np.arange(nx) + 0.5) * (2 / nx)
    yc = -1 + (np.arange(ny) + 0.5) * (2 / ny)
    X, Y = np.meshgrid(xc, yc)
    return X**2 + Y**2 < 1.0


def make_tomo(nx: int = 32, ny: int = 32, n_rays: int = 60, n_views: int = 10, noise_pct: float = 1.0,
              seed=0, phantom: Phantom | None = None, mask="disk") -> Problem:
    """Fan-beam tomography of a two-inclusion phantom on a pixel grid.

    Data are exact line integrals of the analytic phantom plus Gaussian
    noise with standard deviation ``noise_pct/100 * max(b0)``. Rays that
    miss every unknown pixel are dropped and counted in the metadata.
    """
    if nx < 8 or ny < 8:
        raise ValueError("grid must be at least 8x8")
    if n_rays < 1 or n_views < 1:
        raise ValueError("need at least one ray and one view")
    phantom = phantom or Phantom.default()
    shape = (ny, nx)
    m_mask = disk_mask(shape) if mask == "disk" else np.ones(shape, bool) if mask == "full" else np.asarray(mask, bool)
    S, D = fan_geometry(n_rays, n_views)
    A = trace_rays(S, D, shape, m_mask)
    hit = np.diff(A.indptr) > 0
    dropped = int((~hit).sum())
    A = A[hit]
    S, D = S[hit], D[hit]
    b0 = phantom.line_integrals(S, D)
    sigma = noise_pct / 100 * float(np.max(b0))
    w = np.random.default_rng(seed).standard_normal(A.shape[0])
    b = b0 + sigma * w
    pix, cover = phantom.pixel_values(shape)
    x_true = pix[m_mask]
    regions = {f"inclusion{i}": np.flatnonzero(c[m_mask] >= 0.999).tolist() for i, c in enumerate(cover)}
    meta = {"name": "tomo", "grid": [ny, nx], "n_rays": n_rays, "n_views": n_views, "noise_pct": noise_pct,
            "seed": seed, "dropped_rays": dropped, "mask": m_mask.tolist(), "regions": regions,
            "default_L": {"kind": "grid_incidence"}}
    return Problem(sparse(A), b, sigma if sigma > 0 else 1.0, b0, x_true, False, meta)


# ---------------------------------------------------------------------------
# signal-to-noise ratio


def snr_estimate(b, m, sigma) -> float:
    """Data-based SNR, ``||b||^2 / (m sigma^2)``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    b = np.asarray(b, float)
    return float(b @ b / (m * sigma**2))


def snr_prior(frob_sq, m, sigma, beta, vartheta) -> float:
    """SNR implied by the prior: ``(beta vartheta ||A||_F^2 + m sigma^2) / (m sigma^2)``."""
    return (beta * vartheta * frob_sq + m * sigma**2) / (m * sigma**2)


# ---------------------------------------------------------------------------
# bundles


def export_bundle(problem: Problem, directory) -> Path:
    """Write ``A.mtx``, ``b.csv``, optional ``b0.csv``/``x_true.csv`` and ``metadata.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    A = problem.A
    mat = A.matrix if A.materializable else A.todense()
    write_matrix_market(d / "A.mtx", sp.coo_matrix(mat))
    write_csv(d / "b.csv", problem.b)
    if problem.b0 is not None:
        write_csv(d / "b0.csv", problem.b0)
    if problem.x_true is not None:
        write_csv(d / "x_true.csv", problem.x_true)
    meta = {"version": BUNDLE_VERSION, "sigma": problem.sigma, "whitened": problem.whitened_data,
            "metadata": problem.metadata}
    (d / "metadata.json").write_text(json.dumps(meta, indent=1))
    return d


def load_bundle(directory) -> Problem:
    d = Path(directory)
    meta = json.loads((d / "metadata.json").read_text())
    A = read_matrix_market(d / "A.mtx")
    opt = {name: (read_csv(d / f"{name}.csv").ravel() if (d / f"{name}.csv").exists() else None)
           for name in ("b0", "x_true")}
    return Problem(A, read_csv(d / "b.csv").ravel(), float(meta["sigma"]), opt["b0"], opt["x_true"],
                   bool(meta.get("whitened", False)), meta.get("metadata", {}))
