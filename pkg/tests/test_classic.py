import math

import numpy as np
import pytest

from iasreg import classic as cl
from iasreg import operators as op
from iasreg import regularizer as rg
from oracles import dense_general_tikhonov


def ill_posed(m=30, n=30, seed=0, noise=0.01):
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.standard_normal((m, m)))
    V, _ = np.linalg.qr(rng.standard_normal((n, n)))
    s = np.logspace(0, -4, min(m, n))
    A = U[:, : s.size] @ np.diag(s) @ V[:, : s.size].T
    x = np.sin(np.linspace(0, 3, n))
    b = A @ x + noise * rng.standard_normal(m)
    return A, b, x


class TestTikhonov:
    def test_identity_closed_form(self):
        b = np.array([1.0, -2.0, 3.0])
        x, _ = cl.tikhonov_solve(op.identity(3), rg.build_L("identity", n=3), 0.5, b)
        np.testing.assert_allclose(x, b / 1.5, rtol=1e-12)

    def test_large_alpha_shrinks(self):
        b = np.array([1.0, 2.0])
        x, _ = cl.tikhonov_solve(op.identity(2), rg.build_L("identity", n=2), 1e8, b)
        assert np.linalg.norm(x) <= 1e-7

    @pytest.mark.parametrize("kind", ["diff1", "diff2"])
    def test_dense_oracle(self, kind):
        A, b, _ = ill_posed(20, 25, seed=1)
        Lop = rg.build_L(kind, n=25)
        x, info = cl.tikhonov_solve(op.dense(A), Lop, 1e-3, b)
        ref = dense_general_tikhonov(A, Lop.L.toarray(), b, 1e-3)
        assert np.linalg.norm(x - ref) <= 1e-7 * np.linalg.norm(ref)
        assert info.converged

    def test_nonpositive_alpha(self):
        with pytest.raises(ValueError):
            cl.tikhonov_solve(op.identity(2), rg.build_L("identity", n=2), 0.0, np.ones(2))

    def test_discrepancy(self):
        assert cl.discrepancy(op.identity(2), np.array([1.0, 1.0]), np.array([0.0, 3.0])) == 5.0


class TestMorozov:
    def test_identity_closed_form(self):
        # A = L = I: h(alpha) = (alpha/(1+alpha))^2 ||b||^2
        rng = np.random.default_rng(2)
        b = rng.standard_normal(40) * 3
        sigma = 1.0
        res = cl.morozov_bisect(op.identity(40), rg.build_L("identity", n=40), b, sigma)
        q = math.sqrt(40 * sigma**2 / (b @ b))
        exact = q / (1 - q)
        h = cl.discrepancy(op.identity(40), res.x, b)
        assert res.converged and res.bracket_valid
        assert abs(h - 40) <= 0.01 * 40
        assert res.alpha == pytest.approx(exact, rel=0.02)

    def test_discrepancy_monotone_in_alpha(self):
        A, b, _ = ill_posed(seed=3)
        Lop = rg.build_L("diff2", n=30)
        hs = [cl.discrepancy(op.dense(A), cl.tikhonov_solve(op.dense(A), Lop, a, b)[0], b)
              for a in np.logspace(-10, 4, 15)]
        assert np.all(np.diff(hs) >= -1e-10 * max(hs))

    def test_hits_target_on_ill_posed(self):
        A, b, _ = ill_posed(seed=4, noise=0.01)
        res = cl.morozov_bisect(op.dense(A), rg.build_L("diff2", n=30), b, 0.01)
        h = cl.discrepancy(op.dense(A), res.x, b)
        assert res.converged and abs(h - 30 * 1e-4) <= 0.01 * 30 * 1e-4
        assert res.evals == len(res.trace) <= 60

    def test_unreachable_target_flags_upper_end(self):
        b = np.array([1.0, 1.0])
        res = cl.morozov_bisect(op.identity(2), rg.build_L("identity", n=2), b, sigma=100.0)
        assert not res.bracket_valid and not res.converged
        assert res.alpha == pytest.approx(1e13)

    def test_lower_bracket_failure_raises(self):
        # data outside range(A): the residual never drops below ||P_perp b||^2
        A = op.dense(np.array([[1.0], [0.0]]))
        with pytest.raises(cl.MorozovBracketError):
            cl.morozov_bisect(A, rg.build_L("identity", n=1), np.array([0.0, 5.0]), sigma=0.1)

    def test_trace_csv(self, tmp_path):
        res = cl.morozov_bisect(op.identity(5), rg.build_L("identity", n=5), 3 * np.ones(5), 1.0)
        res.write_trace(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "alpha,discrepancy" and len(lines) == res.evals + 1

    def test_options_validation(self):
        with pytest.raises(ValueError):
            cl.MorozovOptions(alpha_min=1.0, alpha_max=0.5)


def test_alpha_from_theta():
    np.testing.assert_allclose(cl.alpha_from_theta(2.0, [4.0, 16.0]), [1.0, 0.5])
    with pytest.raises(ValueError):
        cl.alpha_from_theta(1.0, [0.0])
