import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iasreg import problems as pr
from oracles import chord_length, square_chord


class TestNumdiff:
    def test_matrix_n3(self):
        p = pr.make_numdiff(3, 0.0)
        np.testing.assert_allclose(p.A.todense(), np.tril(np.ones((3, 3))) / 3)

    def test_signal(self):
        u, du = pr.numdiff_signal(0.0)
        assert u == pytest.approx(2.2e-5, rel=0.02)
        assert du == pytest.approx(12 / math.sqrt(math.pi) * math.exp(-9))
        h = 1e-6
        t = 0.37
        fd = (pr.numdiff_signal(t + h)[0] - pr.numdiff_signal(t - h)[0]) / (2 * h)
        assert fd == pytest.approx(pr.numdiff_signal(t)[1], rel=1e-7)

    def test_exact_data(self):
        p = pr.make_numdiff(50, 0.0)
        np.testing.assert_array_equal(p.b, p.b0)
        # rectangle rule of u' approximates u(t) - u(0)
        u0 = pr.numdiff_signal(0.0)[0]
        assert np.max(np.abs(p.b0 - (p.A @ p.x_true) - u0)) < 0.1

    def test_noise_level_chi2(self):
        p = pr.make_numdiff(400, 0.05, seed=3)
        chi2 = np.sum((p.b - p.b0) ** 2) / p.sigma**2
        assert abs(chi2 - 400) <= 0.3 * 400

    def test_snr_matches_relative_noise(self):
        p = pr.make_numdiff(2000, 0.05, seed=1)
        assert pr.snr_estimate(p.b, p.m, p.sigma) == pytest.approx(1 / 0.05**2, rel=0.05)

    def test_reproducible_and_scaled(self):
        a, b = pr.make_numdiff(30, 0.01, seed=5), pr.make_numdiff(30, 0.01, seed=5)
        np.testing.assert_array_equal(a.b, b.b)
        c = pr.make_numdiff(30, 0.02, seed=5)
        np.testing.assert_allclose(c.b - c.b0, 2 * (a.b - a.b0), rtol=1e-12)

    def test_whitened(self):
        p = pr.make_numdiff(10, 0.1)
        w = p.whitened()
        assert w.sigma == 1.0 and w.whitened_data
        np.testing.assert_allclose(w.b, p.b / p.sigma)
        np.testing.assert_allclose(w.A.todense(), p.A.todense() / p.sigma)
        assert w.whitened() is w

    def test_errors(self):
        with pytest.raises(ValueError):
            pr.make_numdiff(1)
        with pytest.raises(ValueError):
            pr.make_numdiff(10, -0.1)


class TestRayTracing:
    def test_axis_aligned_single_pixel(self):
        A = pr.trace_rays(np.array([[-2.0, 0.25]]), np.array([[1.0, 0.0]]), (2, 2))
        # row y in [0, 1] is pixel row 1; both pixels get length 1
        np.testing.assert_allclose(A.toarray(), [[0, 0, 1, 1]])

    def test_row_sums_are_square_chords(self):
        S, D = pr.fan_geometry(25, 7)
        A = pr.trace_rays(S, D, (16, 16), np.ones((16, 16), bool))
        chords = [square_chord(s, d) for s, d in zip(S, D)]
        np.testing.assert_allclose(np.asarray(A.sum(axis=1)).ravel(), chords, atol=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), st.floats(0, 2 * math.pi))
    def test_random_rays_sum_to_chord(self, px, py, ang):
        # source well outside the square, so the traced ray covers the whole chord
        s = np.array([px, py]) - 5 * np.array([math.cos(ang), math.sin(ang)])
        d = np.array([math.cos(ang), math.sin(ang)])
        A = pr.trace_rays(s[None], d[None], (9, 7))
        assert A.sum() == pytest.approx(square_chord(s, d), abs=1e-10)
        assert np.all(A.data > 0)

    def test_uniform_disk_chords(self):
        S, D = pr.fan_geometry(40, 5)
        ph = pr.Phantom.uniform(2.0)
        ref = [2.0 * chord_length(s, d, (0, 0), 1.0) for s, d in zip(S, D)]
        np.testing.assert_allclose(ph.line_integrals(S, D), ref, atol=1e-6)

    def test_kite_chords_match_rasterized(self):
        k = pr.kite(n_vertices=4096)
        # horizontal rays keep the rasterization on a single scanline each
        S = np.array([[-2.0, 0.3], [-2.0, 0.05], [-2.0, 0.62]])
        D = np.tile([1.0, 0.0], (3, 1))
        s = np.linspace(-3, 3, 600001)
        for s0, d in zip(S, D):
            pts = s0 + s[:, None] * d
            inside = k.contains(pts[:, 0], pts[:, 1])
            assert k.chords(s0[None], d[None])[0] == pytest.approx(inside.sum() * (s[1] - s[0]), abs=1e-4)

    def test_fan_covers_domain(self):
        S, D = pr.fan_geometry(60, 10)
        assert S.shape == D.shape == (600, 2)
        np.testing.assert_allclose(np.linalg.norm(D, axis=1), 1.0)
        dist = np.abs(S[:, 0] * D[:, 1] - S[:, 1] * D[:, 0])
        assert dist.max() < 1.0


class TestTomo:
    def test_default_instance(self):
        p = pr.make_tomo()
        mask = np.asarray(p.metadata["mask"], bool)
        assert p.n == mask.sum() and p.m + p.metadata["dropped_rays"] == 600
        A = p.A.matrix
        assert A.min() >= 0 and np.all(np.diff(A.indptr) > 0)
        assert np.all(np.diff(A.indptr) <= 2 * 32)
        regions = p.metadata["regions"]
        np.testing.assert_allclose(p.x_true[regions["inclusion0"]], 1.2)
        np.testing.assert_allclose(p.x_true[regions["inclusion1"]], 1.0)
        chi2 = np.sum((p.b - p.b0) ** 2) / p.sigma**2
        assert abs(chi2 - p.m) <= 0.3 * p.m

    def test_discretization_consistent_with_line_integrals(self):
        p = pr.make_tomo(64, 64, 30, 4, noise_pct=0.0)
        rel = np.linalg.norm(p.A @ p.x_true - p.b0) / np.linalg.norm(p.b0)
        assert rel < 0.05

    def test_reproducible(self):
        a, b = pr.make_tomo(16, 16, 20, 3, seed=2), pr.make_tomo(16, 16, 20, 3, seed=2)
        np.testing.assert_array_equal(a.b, b.b)

    def test_errors(self):
        with pytest.raises(ValueError):
            pr.make_tomo(4, 4)
        with pytest.raises(ValueError):
            pr.make_tomo(n_rays=0)


class TestSnrAndBundles:
    def test_snr_prior_roundtrip(self):
        from iasreg.hyperprior import select_scale_snr
        v = select_scale_snr(12.0, 30, 0.2, 8.0, 1.7)
        assert pr.snr_prior(12.0, 30, 0.2, 1.7, v) == pytest.approx(8.0)
        with pytest.raises(ValueError):
            pr.snr_estimate(np.ones(2), 2, 0.0)

    @pytest.mark.parametrize("maker", [lambda: pr.make_numdiff(12, 0.05), lambda: pr.make_tomo(12, 12, 10, 2)])
    def test_bundle_roundtrip(self, tmp_path, maker):
        p = maker()
        pr.export_bundle(p, tmp_path / "bundle")
        q = pr.load_bundle(tmp_path / "bundle")
        np.testing.assert_allclose(q.A.todense(), p.A.todense(), rtol=1e-15)
        np.testing.assert_array_equal(q.b, p.b)
        np.testing.assert_array_equal(q.x_true, p.x_true)
        assert q.sigma == p.sigma and q.metadata["name"] == p.metadata["name"]
        assert q.default_L().shape == p.default_L().shape
