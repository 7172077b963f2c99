import numpy as np
import pytest

from dlsfem import basis
from dlsfem.basis import (
    UnsupportedOrder,
    eval_basis,
    gauss_rule,
    pullback,
    v_dim,
    w_dim,
    y_dim,
)


class TestQuadrature:
    def test_midpoint(self):
        r = gauss_rule(1)
        np.testing.assert_allclose(r.points, [[0.5, 0.5]])
        np.testing.assert_allclose(r.weights, [1.0])

    def test_degree3_exactness(self):
        r = gauss_rule(2)
        val = np.sum(r.weights * r.points[:, 0] ** 2)
        assert val == pytest.approx(1.0 / 3.0)

    def test_monomial_q5(self):
        r = gauss_rule(5)
        val = np.sum(r.weights * r.points[:, 0] ** 8 * r.points[:, 1] ** 6)
        assert val == pytest.approx(1.0 / 63.0, abs=1e-15)

    @pytest.mark.parametrize("q", [1, 2, 3, 4, 6])
    def test_weights_positive_sum_to_area(self, q):
        r = gauss_rule(q)
        assert np.all(r.weights > 0)
        assert r.weights.sum() == pytest.approx(1.0)
        assert r.weights_1d.sum() == pytest.approx(1.0)

    @pytest.mark.parametrize("q", [2, 3, 5])
    def test_exact_to_degree_2q_minus_1(self, q):
        r = gauss_rule(q)
        k = 2 * q - 1
        val = np.sum(r.weights_1d * r.points_1d**k)
        assert val == pytest.approx(1.0 / (k + 1), rel=1e-14)


class TestDimensions:
    @pytest.mark.parametrize("p", [1, 2, 3, 4])
    def test_dims(self, p):
        r = gauss_rule(p + 2)
        assert w_dim(p) == (p + 1) ** 2
        assert v_dim(p) == 2 * p * (p + 1)
        assert y_dim(p) == p * p
        assert basis.w_table(p, r.points)[0].shape[0] == w_dim(p)
        assert basis.v_table(p, r.points)[0].shape[0] == v_dim(p)
        assert basis.y_table(p, r.points).shape[0] == y_dim(p)


class TestYOrthonormality:
    @pytest.mark.parametrize("p", [1, 2, 3, 4])
    def test_gram_is_identity(self, p):
        r = gauss_rule(p + 2)
        y = basis.y_table(p, r.points)
        gram = np.einsum("ip,p,jp->ij", y, r.weights, y)
        assert np.abs(gram - np.eye(p * p)).max() <= 1e-13


class TestExactSequence:
    @pytest.mark.parametrize("p", [1, 2, 3, 4])
    def test_div_v_in_span_y(self, p):
        r = gauss_rule(p + 2)
        _, dv = basis.v_table(p, r.points)
        y = basis.y_table(p, r.points)
        coef = np.einsum("ip,p,jp->ij", dv, r.weights, y)
        resid = np.abs(coef @ y - dv).max()
        assert resid <= 1e-12

    def test_div_matches_l2_fit_pointwise(self):
        # fit div of each V^2 function onto Y^2 values at random points
        rng = np.random.default_rng(4)
        pts = rng.random((25, 2))
        vv, dv = basis.v_table(2, pts)
        y = basis.y_table(2, pts)
        coef, *_ = np.linalg.lstsq(y.T, dv.T, rcond=None)
        np.testing.assert_allclose(coef.T @ y, dv, atol=1e-11)


class TestWBasis:
    def test_vertex_values_at_corner(self):
        vals, _ = basis.w_table(1, np.array([[0.0, 0.0]]))
        np.testing.assert_allclose(vals[:, 0], [1.0, 0.0, 0.0, 0.0])

    def test_vertex_partition_of_unity(self):
        rng = np.random.default_rng(1)
        pts = rng.random((10, 2))
        vals, _ = basis.w_table(3, pts)
        np.testing.assert_allclose(vals[:4].sum(axis=0), np.ones(10), atol=1e-14)

    def test_kernel_derivative_is_legendre(self):
        t = np.linspace(0, 1, 7)
        vals, dvals = basis.h1_hierarchical(4, t)
        leg, _ = basis.legendre_shifted(3, t)
        for k in range(2, 5):
            np.testing.assert_allclose(dvals[k], leg[k - 1], atol=1e-13)
        # kernels vanish at the ends
        np.testing.assert_allclose(vals[2:, [0, -1]], 0.0, atol=1e-14)


class TestEdgeTraces:
    @pytest.mark.parametrize("p", [1, 2, 3, 4])
    def test_flux_trace_spans_degree_p_minus_1(self, p):
        # normal trace of V^p on an edge spans exactly polynomials of
        # degree p-1 (fit residual test)
        t = np.linspace(0.01, 0.99, 40)
        for le in range(4):
            vv, _ = basis.v_table(p, basis.edge_points(le, t))
            n = basis.EDGE_NORMALS[le]
            tr = np.einsum("icp,c->ip", vv, n)
            nz = tr[np.abs(tr).max(axis=1) > 1e-12]
            vander = np.vander(t, p, increasing=True).T
            coef, *_ = np.linalg.lstsq(vander.T, nz.T, rcond=None)
            assert np.abs(coef.T @ vander - nz).max() <= 1e-10
            # and the full degree p-1 space is reached
            assert np.linalg.matrix_rank(nz, tol=1e-10) == p

    @pytest.mark.parametrize("p", [1, 2, 3])
    def test_w_trace_spans_degree_p(self, p):
        t = np.linspace(0.0, 1.0, 30)
        for le in range(4):
            wv, _ = basis.w_table(p, basis.edge_points(le, t))
            nz = wv[np.abs(wv).max(axis=1) > 1e-12]
            vander = np.vander(t, p + 1, increasing=True).T
            coef, *_ = np.linalg.lstsq(vander.T, nz.T, rcond=None)
            assert np.abs(coef.T @ vander - nz).max() <= 1e-10
            assert np.linalg.matrix_rank(nz, tol=1e-10) == p + 1


class TestPullback:
    def test_h_equal_one_is_identity(self):
        r = gauss_rule(3)
        for space, tabs in (
            ("W", dict(zip(("values", "grad"), basis.w_table(2, r.points)))),
            ("V", dict(zip(("values", "div"), basis.v_table(2, r.points)))),
            ("Y", {"values": basis.y_table(2, r.points)}),
        ):
            out = pullback(1.0, space, tabs)
            for key in tabs:
                np.testing.assert_array_equal(out[key], tabs[key])

    def test_gradient_chain_rule(self):
        r = gauss_rule(3)
        tabs = dict(zip(("values", "grad"), basis.w_table(1, r.points)))
        out = pullback(0.5, "W", tabs)
        np.testing.assert_allclose(out["grad"], 2.0 * tabs["grad"])

    def test_divergence_theorem_on_element(self):
        # volume integral of div sigma equals the boundary flux for a
        # random V^2 combination on an h=1/3 element
        rng = np.random.default_rng(9)
        h = 1.0 / 3.0
        coef = rng.standard_normal(v_dim(2))
        r = gauss_rule(5)
        vv, dv = basis.v_table(2, r.points)
        vol = np.sum(r.weights * (coef @ dv)) / (h * h) * h * h
        t, w = r.points_1d, r.weights_1d
        flux = 0.0
        for le in range(4):
            ve, _ = basis.v_table(2, basis.edge_points(le, t))
            tr = np.einsum("i,icp,c->p", coef, ve, basis.EDGE_NORMALS[le]) / h
            flux += np.sum(w * tr) * h
        assert vol == pytest.approx(flux, abs=1e-13)


class TestEvalBasis:
    def test_dispatch_and_tables(self):
        r = gauss_rule(3)
        out = eval_basis("W", 2, r.points)
        assert "grad" in out and out["values"].shape == (9, r.n_points)
        out = eval_basis("V", 2, r.points)
        assert "div" in out
        out = eval_basis("Y", 2, r.points)
        assert out["values"].shape == (4, r.n_points)
        out = eval_basis("trace_W", 2, r.points_1d)
        assert out["values"].shape == (3, 3)
        out = eval_basis("trace_V_n", 2, r.points_1d)
        assert out["values"].shape == (2, 3)

    def test_unsupported_order(self):
        with pytest.raises(UnsupportedOrder):
            eval_basis("W", 0, np.zeros((1, 2)))
