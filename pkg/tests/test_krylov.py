import json

import numpy as np
import pytest
from scipy.linalg import hilbert

from iasreg import krylov as kr
from iasreg import operators as op
from oracles import dense_ridge


def spd(rng, n, cond=None):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    ev = rng.uniform(0.1, 10, n) if cond is None else np.logspace(0, np.log10(cond), n)
    return Q @ np.diag(ev) @ Q.T


def shifted(M, s):
    return op.dense(M + s * np.eye(M.shape[0]))


class TestTridiag:
    def test_identity_is_one_step(self):
        f = kr.lanczos_tridiag(op.identity(3), np.array([1.0, 2.0, 3.0]))
        assert f.steps == 1 and f.terminated_early
        assert f.alphas[0] == pytest.approx(1.0) and f.gammas[0] == 0.0

    def test_diag_eigenvalues(self):
        f = kr.lanczos_tridiag(op.dense(np.diag([1.0, 2.0])), np.array([1.0, 1.0]) / np.sqrt(2))
        np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(f.T())), [1.0, 2.0], atol=1e-14)

    def test_bv1_identity_spd8(self):
        rng = np.random.default_rng(0)
        M = spd(rng, 8)
        f = kr.lanczos_tridiag(op.dense(M), rng.standard_normal(8), kr.KrylovOptions(max_steps=5))
        assert f.steps == 5
        assert np.abs(M @ f.V[:, :-1] - f.V @ f.T_ext()).max() <= 1e-10

    def test_zero_start(self):
        with pytest.raises(kr.ZeroStartError):
            kr.lanczos_tridiag(op.identity(3), np.zeros(3))

    def test_exact_termination_low_rank(self):
        rng = np.random.default_rng(1)
        B = rng.standard_normal((12, 4))
        M = B @ B.T
        c = M @ rng.standard_normal(12)
        f = kr.lanczos_tridiag(op.dense(M), c)
        assert f.terminated_early and f.steps <= 5

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        M = spd(rng, 30)
        c = rng.standard_normal(30)
        opts = kr.KrylovOptions(max_steps=12)
        f0 = kr.lanczos_tridiag(op.dense(M), c, opts)
        f1 = kr.lanczos_tridiag(shifted(M, 1.0), c, opts)
        assert np.abs(f0.V - f1.V).max() <= 1e-12
        np.testing.assert_allclose(f1.alphas, f0.alphas + 1.0, rtol=1e-12)

    def test_orthogonality_loss_is_reported_without_reorth(self):
        H = hilbert(50)
        c = np.ones(50)
        loose = kr.KrylovOptions(max_steps=40, reorthogonalize=False, rel_residual_tol=1e-15)
        tight = kr.KrylovOptions(max_steps=40, rel_residual_tol=1e-15)
        _, info_off = kr.solve_shifted_sym(op.dense(H * 1e6), c, loose)
        _, info_on = kr.solve_shifted_sym(op.dense(H * 1e6), c, tight)
        assert info_on.orthogonality_loss <= 1e-10
        assert info_off.orthogonality_loss > 100 * info_on.orthogonality_loss

    def test_symmetry_check(self):
        N = np.triu(np.ones((4, 4)))
        with pytest.raises(ValueError, match="symmetry"):
            kr.lanczos_tridiag(op.dense(N), np.ones(4), kr.KrylovOptions(check_symmetry=True))


class TestShiftedSolve:
    def test_identity(self):
        c = np.array([1.0, -2.0, 4.0])
        y, info = kr.solve_shifted_sym(op.identity(3), c)
        np.testing.assert_allclose(y, c / 2, rtol=1e-15)
        assert info.steps == 1 and info.converged

    def test_zero_operator(self):
        c = np.array([1.0, 2.0])
        y, _ = kr.solve_shifted_sym(op.zero(2, 2), c)
        np.testing.assert_allclose(y, c, rtol=1e-15)

    def test_spd10_dense(self):
        rng = np.random.default_rng(3)
        M = spd(rng, 10)
        c = rng.standard_normal(10)
        y, info = kr.solve_shifted_sym(op.dense(M), c)
        ref = np.linalg.solve(M + np.eye(10), c)
        assert np.linalg.norm(y - ref) <= 1e-8 * np.linalg.norm(ref)
        assert info.converged

    @pytest.mark.parametrize("steps", [1, 2, 3, 5, 8])
    def test_reported_residual_is_explicit_residual_tridiag(self, steps):
        rng = np.random.default_rng(4)
        M = spd(rng, 40, cond=1e4)
        c = rng.standard_normal(40)
        y, info = kr.solve_shifted_sym(op.dense(M), c, kr.KrylovOptions(max_steps=steps))
        explicit = np.linalg.norm((M + np.eye(40)) @ y - c)
        assert info.steps == steps and not info.converged
        assert info.residual_norm == pytest.approx(explicit, rel=1e-8)

    @pytest.mark.parametrize("steps", [1, 2, 4, 7])
    def test_reported_residual_is_explicit_residual_bidiag(self, steps):
        rng = np.random.default_rng(5)
        A = rng.standard_normal((25, 60)) * np.logspace(0, -3, 60)
        c = rng.standard_normal(25)
        y, info = kr.solve_shifted_normal(op.dense(A), c, kr.KrylovOptions(max_steps=steps))
        explicit = np.linalg.norm((A @ A.T + np.eye(25)) @ y - c)
        assert info.residual_norm == pytest.approx(explicit, rel=1e-8)

    def test_not_converged_flag(self):
        rng = np.random.default_rng(6)
        M = spd(rng, 30, cond=1e6)
        _, info = kr.solve_shifted_sym(op.dense(M), rng.standard_normal(30), kr.KrylovOptions(max_steps=2))
        assert not info.converged and info.rel_residual > 1e-8

    def test_low_memory_matches(self):
        rng = np.random.default_rng(7)
        M = spd(rng, 20)
        c = rng.standard_normal(20)
        y0, _ = kr.solve_shifted_sym(op.dense(M), c)
        y1, info = kr.solve_shifted_sym(op.dense(M), c, kr.KrylovOptions(low_memory=True))
        np.testing.assert_allclose(y1, y0, rtol=1e-7)
        assert info.orthogonality_loss is None

    def test_diagnostics_json(self):
        _, info = kr.solve_shifted_sym(op.identity(3), np.ones(3))
        d = json.loads(json.dumps(info.to_dict()))
        assert d["steps"] == 1 and d["converged"] is True


class TestBidiag:
    def test_identity_terminates(self):
        f = kr.lanczos_bidiag(op.identity(5), np.arange(1.0, 6.0))
        assert f.steps == 1 and f.terminated_early
        assert f.rhos[0] == pytest.approx(1.0) and f.sigmas[1] == 0.0

    def test_identities_and_orthonormality(self):
        rng = np.random.default_rng(8)
        A = rng.standard_normal((6, 9))
        b = rng.standard_normal(6)
        f = kr.lanczos_bidiag(op.dense(A), b, kr.KrylovOptions(max_steps=4))
        l = f.steps
        U, V = f.U, f.V
        assert np.abs(U.T @ U - np.eye(l)).max() <= 1e-10
        assert np.abs(V.T @ V - np.eye(l + 1)).max() <= 1e-10
        e = np.zeros(l)
        e[-1] = 1.0
        assert np.abs(A @ U - V[:, :l] @ f.C() - f.sigmas[l] * np.outer(V[:, l], e)).max() <= 1e-10
        assert np.abs(A.T @ V[:, :l] - U @ f.C().T).max() <= 1e-10

    def test_cct_matches_tridiagonalization(self):
        rng = np.random.default_rng(9)
        A = rng.standard_normal((6, 9))
        b = rng.standard_normal(6)
        f = kr.lanczos_bidiag(op.dense(A), b, kr.KrylovOptions(max_steps=5))
        t = kr.lanczos_tridiag(op.dense(A @ A.T), b, kr.KrylovOptions(max_steps=5))
        C = f.C()
        assert np.abs(C @ C.T - t.T()).max() <= 1e-8
        alphas, gammas = f.tridiagonal()
        np.testing.assert_allclose(alphas, t.alphas, atol=1e-8)
        np.testing.assert_allclose(gammas, t.gammas, atol=1e-8)

    def test_zero_start(self):
        with pytest.raises(kr.ZeroStartError):
            kr.lanczos_bidiag(op.identity(3), np.zeros(3))


class TestTikhonovStandard:
    def test_zero_operator(self):
        xi, _ = kr.solve_tikhonov_standard(op.zero(3, 5), np.ones(3))
        np.testing.assert_array_equal(xi, 0)
        xi, info = kr.solve_tikhonov_standard(op.zero(5, 3), np.ones(5))
        np.testing.assert_array_equal(xi, 0)
        assert info.path == "tikhonov"

    def test_identity(self):
        b = np.array([2.0, -4.0, 6.0])
        xi, _ = kr.solve_tikhonov_standard(op.identity(3), b)
        np.testing.assert_allclose(xi, b / 2, rtol=1e-14)

    @pytest.mark.parametrize("shape,path", [((5, 12), "wiener"), ((12, 5), "tikhonov"), ((7, 7), "tikhonov")])
    def test_matches_dense(self, shape, path):
        rng = np.random.default_rng(10)
        A = rng.standard_normal(shape)
        b = rng.standard_normal(shape[0])
        xi, info = kr.solve_tikhonov_standard(op.dense(A), b)
        ref = dense_ridge(A, b)
        assert info.path == path
        assert np.linalg.norm(xi - ref) <= 1e-8 * np.linalg.norm(ref)

    def test_zero_data(self):
        with pytest.raises(kr.ZeroStartError):
            kr.solve_tikhonov_standard(op.identity(3), np.zeros(3))

    def test_options_validation(self):
        with pytest.raises(ValueError):
            kr.KrylovOptions(rel_residual_tol=1.0)
        with pytest.raises(ValueError):
            kr.KrylovOptions(max_steps=0)
