import math

import numpy as np
import pytest

from dlsfem.assembly import (
    Options,
    assemble_ne,
    assemble_overdetermined,
    build_context,
)
from dlsfem.formulation import ManufacturedCase, make_case, make_formulation
from dlsfem.interpolate import interpolate_case
from dlsfem.mesh import uniform_mesh
from dlsfem.solve import (
    ConstraintSystem,
    Solution,
    ZeroSolution,
    error_norms,
    residual_rho,
    solve_ls,
    solve_ne,
    solve_saddle_constraints,
    solve_weighted_constraints,
)

POISSON_FORMULATIONS = ["fosls-strong", "primal-dpg", "ultraweak-dpg"]


def _solve_both(fname, n, p, dp, cname="poisson-sine", options=None):
    form = make_formulation(fname, p=p, dp=dp)
    case = make_case(cname)
    mesh = uniform_mesh(n)
    ctx = build_context(mesh, form, case, options)
    a, f, _ = assemble_ne(ctx)
    bt, lt, _ = assemble_overdetermined(ctx)
    return (
        solve_ne(a, f, ctx),
        solve_ls(bt, lt, ctx),
        (form, case, mesh, ctx, bt, lt),
    )


class TestAgreement:
    @pytest.mark.parametrize("fname", POISSON_FORMULATIONS)
    @pytest.mark.parametrize("n,p", [(2, 1), (2, 3), (8, 2), (16, 1)])
    def test_ne_qr_coefficient_agreement(self, fname, n, p):
        sol_ne, sol_qr, _ = _solve_both(fname, n, p, 1)
        diff = np.linalg.norm(sol_ne.coefficients - sol_qr.coefficients)
        assert diff <= 1e-8 * np.linalg.norm(sol_qr.coefficients)

    def test_agreement_without_condensation(self):
        sol_ne, sol_qr, _ = _solve_both(
            "ultraweak-dpg", 4, 2, 1, options=Options(condense=False)
        )
        diff = np.linalg.norm(sol_ne.coefficients - sol_qr.coefficients)
        assert diff <= 1e-8 * np.linalg.norm(sol_qr.coefficients)

    def test_condensed_equals_uncondensed(self):
        _, sol_c, _ = _solve_both("ultraweak-dpg", 4, 2, 1)
        _, sol_u, _ = _solve_both(
            "ultraweak-dpg", 4, 2, 1, options=Options(condense=False)
        )
        diff = np.linalg.norm(sol_c.coefficients - sol_u.coefficients)
        assert diff <= 1e-10 * np.linalg.norm(sol_u.coefficients)


class TestSolutionInvariants:
    @pytest.mark.parametrize("fname", POISSON_FORMULATIONS + ["acoustics-ultraweak"])
    def test_indicator_decomposition(self, fname):
        cname = "acoustics-resonance" if fname.startswith("acou") else "poisson-sine"
        _, sol_qr, _ = _solve_both(fname, 4, 2, 1, cname)
        total = math.sqrt(float(np.sum(sol_qr.eta**2)))
        assert total == pytest.approx(sol_qr.residual_norm, rel=1e-12)

    def test_galerkin_orthogonality(self):
        sol_ne, sol_qr, (form, case, mesh, ctx, bt, lt) = _solve_both(
            "ultraweak-dpg", 4, 2, 1
        )
        scale = math.sqrt(float(bt.col_norms_sq().sum())) * np.linalg.norm(lt)
        assert sol_qr.galerkin_residual <= 1000 * np.finfo(np.float64).eps * scale

    def test_consistent_single_element(self):
        # load in the range of the operator: residual at round-off level
        form = make_formulation("fosls-strong", p=2, dp=1)
        case = make_case("poisson-sine")
        mesh = uniform_mesh(1)
        ctx = build_context(mesh, form, case, Options(condense=False))
        bt, lt, _ = assemble_overdetermined(ctx)
        ui = interpolate_case(ctx, case)
        lt_consistent = bt.matvec(ui[ctx.solve_ids])
        sol = solve_ls(bt, lt_consistent, ctx)
        assert sol.residual_norm <= 1e-12

    def test_zero_load_zero_solution(self):
        form = make_formulation("primal-dpg", p=1, dp=1)
        case = make_case("poisson-sine")

        zero_case = ManufacturedCase(
            name="zero",
            kind="poisson",
            fields=case.fields,
            f=lambda x, y: np.zeros_like(x),
            boundary_value=lambda x, y: np.zeros_like(x),
        )
        ctx = build_context(uniform_mesh(2), form, zero_case)
        a, f, _ = assemble_ne(ctx)
        sol = solve_ne(a, f, ctx)
        np.testing.assert_allclose(sol.coefficients, 0.0, atol=1e-14)


class TestLiftIndependence:
    def test_two_lifts_same_total_solution(self):
        # boundary data from u = 1 + x + y (harmonic, f = 0); perturbing the
        # lift by an interior (homogeneous) function must not change the sum
        form = make_formulation("primal-dpg", p=2, dp=1)

        def u_exact(x, y):
            return 1.0 + x + y

        case = ManufacturedCase(
            name="affine",
            kind="poisson",
            fields={
                "u": u_exact,
                "sigx": lambda x, y: np.ones_like(x),
                "sigy": lambda x, y: np.ones_like(x),
            },
            f=lambda x, y: np.zeros_like(x),
            boundary_value=u_exact,
        )
        mesh = uniform_mesh(2)
        ctx = build_context(mesh, form, case)
        bt, lt, _ = assemble_overdetermined(ctx)
        sol_a = solve_ls(bt, lt, ctx)
        # second lift: same boundary values plus an interior perturbation
        rng = np.random.default_rng(0)
        ctx2 = build_context(mesh, form, case)
        perturb = np.zeros(ctx2.n_total)
        free_u = np.setdiff1d(
            np.arange(ctx2.layouts[0].n_total), ctx2.layouts[0].boundary_dofs
        )
        perturb[free_u] = rng.standard_normal(free_u.size)
        ctx2.lift_full = ctx2.lift_full + perturb
        for rec in ctx2.records:
            rec.lt = rec.lt - rec.bt @ perturb[rec.gdofs[rec.free_local]]
        bt2, lt2, _ = assemble_overdetermined(ctx2)
        sol_b = solve_ls(bt2, lt2, ctx2)
        diff = np.linalg.norm(sol_a.coefficients - sol_b.coefficients)
        assert diff <= 1e-10 * np.linalg.norm(sol_a.coefficients)
        err = error_norms(sol_a, case, form, mesh)
        assert err["u_l2_rel"] <= 1e-12   # affine data is in the space


class TestConstraints:
    def _unconstrained_setup(self, n=2):
        form = make_formulation("primal-dpg", p=1, dp=1)
        case = make_case("poisson-sine")
        mesh = uniform_mesh(n)
        options = Options(condense=False, eliminate_bc=False)
        ctx = build_context(mesh, form, case, options)
        bt, lt, _ = assemble_overdetermined(ctx)
        a, f, _ = assemble_ne(ctx)
        return form, case, mesh, ctx, bt, lt, a, f

    def _boundary_constraints(self, ctx, alpha):
        lay = ctx.layouts[0]
        fixed = lay.boundary_dofs
        c = np.zeros((fixed.size, ctx.n_solve))
        c[np.arange(fixed.size), ctx.solve_index[fixed]] = 1.0
        return ConstraintSystem(c=c, d=np.zeros(fixed.size), alpha=alpha)

    def test_full_pinning(self):
        form, case, mesh, ctx, bt, lt, a, f = self._unconstrained_setup()
        rng = np.random.default_rng(1)
        u0 = rng.standard_normal(ctx.n_solve)
        cons = ConstraintSystem(c=np.eye(ctx.n_solve), d=u0, alpha=1e8)
        sol = solve_weighted_constraints(bt, lt, cons, ctx)
        assert np.linalg.norm(sol.system_vector - u0) <= 1e-6 * np.linalg.norm(u0)

    def test_alpha_zero_is_unconstrained(self):
        # needs a well-posed base problem, so keep the BC elimination and
        # constrain something else
        form = make_formulation("primal-dpg", p=1, dp=1)
        case = make_case("poisson-sine")
        ctx = build_context(uniform_mesh(2), form, case, Options(condense=False))
        bt, lt, _ = assemble_overdetermined(ctx)
        c = np.zeros((1, ctx.n_solve))
        c[0, 0] = 1.0
        cons = ConstraintSystem(c=c, d=np.array([3.0]), alpha=0.0)
        sol = solve_weighted_constraints(bt, lt, cons, ctx)
        ref = solve_ls(bt, lt, ctx, precondition=False)
        np.testing.assert_allclose(
            sol.system_vector, ref.system_vector, atol=1e-10 * np.linalg.norm(ref.system_vector)
        )

    def test_constraint_residual_monotone_in_alpha(self):
        form, case, mesh, ctx, bt, lt, a, f = self._unconstrained_setup()
        resids = []
        for alpha in (1e2, 1e4, 1e6):
            cons = self._boundary_constraints(ctx, alpha)
            sol = solve_weighted_constraints(bt, lt, cons, ctx)
            resids.append(np.linalg.norm(cons.c @ sol.system_vector - cons.d))
        assert resids[1] < resids[0] and resids[2] < resids[1]

    def test_weighting_matches_elimination(self):
        # Dirichlet by weighting at alpha = 1e8 vs. column elimination
        form, case, mesh, ctx, bt, lt, a, f = self._unconstrained_setup()
        cons = self._boundary_constraints(ctx, alpha=1e8)
        sol_w = solve_weighted_constraints(bt, lt, cons, ctx)
        ctx_e = build_context(mesh, form, case, Options(condense=False))
        bt_e, lt_e, _ = assemble_overdetermined(ctx_e)
        sol_e = solve_ls(bt_e, lt_e, ctx_e)
        diff = np.linalg.norm(sol_w.coefficients - sol_e.coefficients)
        assert diff <= 1e-6 * np.linalg.norm(sol_e.coefficients)

    def test_saddle_empty_constraints_is_ne(self):
        form = make_formulation("primal-dpg", p=1, dp=1)
        case = make_case("poisson-sine")
        ctx = build_context(uniform_mesh(2), form, case, Options(condense=False))
        a, f, _ = assemble_ne(ctx)
        cons = ConstraintSystem(c=np.zeros((0, ctx.n_solve)), d=np.zeros(0))
        sol, w = solve_saddle_constraints(a, f, cons, ctx)
        ref = solve_ne(a, f, ctx, precondition=False)
        np.testing.assert_allclose(sol.system_vector, ref.system_vector, atol=1e-11)
        assert w.size == 0

    def test_saddle_matches_elimination(self):
        form, case, mesh, ctx, bt, lt, a, f = self._unconstrained_setup()
        cons = self._boundary_constraints(ctx, alpha=1.0)
        sol_s, w = solve_saddle_constraints(a, f, cons, ctx)
        ctx_e = build_context(mesh, form, case, Options(condense=False))
        bt_e, lt_e, _ = assemble_overdetermined(ctx_e)
        sol_e = solve_ls(bt_e, lt_e, ctx_e)
        diff = np.linalg.norm(sol_s.coefficients - sol_e.coefficients)
        assert diff <= 1e-9 * np.linalg.norm(sol_e.coefficients)

    def test_saddle_weighting_limit(self):
        form, case, mesh, ctx, bt, lt, a, f = self._unconstrained_setup()
        cons_s = self._boundary_constraints(ctx, alpha=1.0)
        sol_s, _ = solve_saddle_constraints(a, f, cons_s, ctx)
        cons_w = self._boundary_constraints(ctx, alpha=1e8)
        sol_w = solve_weighted_constraints(bt, lt, cons_w, ctx)
        diff = np.linalg.norm(sol_s.system_vector - sol_w.system_vector)
        assert diff <= 1e-5 * max(np.linalg.norm(sol_s.system_vector), 1.0)

    def test_random_saddle_block_residual(self):
        rng = np.random.default_rng(23)
        form, case, mesh, ctx, bt, lt, a, f = self._unconstrained_setup()
        c = rng.standard_normal((3, ctx.n_solve))
        cons = ConstraintSystem(c=c, d=rng.standard_normal(3))
        sol, w = solve_saddle_constraints(a, f, cons, ctx)
        ad = a.to_dense()
        r1 = ad @ sol.system_vector + c.T @ w - f
        r2 = c @ sol.system_vector - cons.d
        scale = np.linalg.norm(ad) * np.linalg.norm(sol.system_vector)
        assert np.linalg.norm(r1) <= 1e-11 * max(scale, 1.0)
        assert np.linalg.norm(r2) <= 1e-11 * max(np.linalg.norm(cons.d), 1.0)


class TestRho:
    def test_consistent_load_gives_tiny_rho(self):
        form = make_formulation("fosls-strong", p=2, dp=1)
        case = make_case("poisson-sine")
        mesh = uniform_mesh(2)
        ctx = build_context(mesh, form, case, Options(condense=False))
        bt, lt, _ = assemble_overdetermined(ctx)
        ui = interpolate_case(ctx, case)
        lt_c = bt.matvec(ui[ctx.solve_ids])
        sol = solve_ls(bt, lt_c, ctx)
        assert residual_rho(bt, lt_c, sol) <= 1e-12

    def test_orthogonal_load_reports_inf(self):
        form = make_formulation("primal-dpg", p=1, dp=1)
        case = make_case("poisson-sine")
        mesh = uniform_mesh(2)
        ctx = build_context(mesh, form, case, Options(condense=False))
        bt, lt, _ = assemble_overdetermined(ctx)
        dense = bt.to_dense()
        q, _ = np.linalg.qr(dense)
        rng = np.random.default_rng(3)
        r = rng.standard_normal(bt.n_rows)
        l_perp = r - q @ (q.T @ r)
        sol = solve_ls(bt, l_perp, ctx)
        assert residual_rho(bt, l_perp, sol) == math.inf

    def test_zero_solution_of_zero_load_raises(self):
        form = make_formulation("primal-dpg", p=1, dp=1)
        case = make_case("poisson-sine")
        ctx = build_context(uniform_mesh(2), form, case, Options(condense=False))
        bt, lt, _ = assemble_overdetermined(ctx)
        sol = solve_ls(bt, np.zeros(bt.n_rows), ctx)
        with pytest.raises(ZeroSolution):
            residual_rho(bt, np.zeros(bt.n_rows), sol)

    def test_rho_decreases_under_refinement(self):
        form = make_formulation("ultraweak-dpg", p=2, dp=1)
        case = make_case("poisson-sine")
        rhos = []
        for n in (1, 2, 4, 8):
            ctx = build_context(uniform_mesh(n), form, case)
            bt, lt, _ = assemble_overdetermined(ctx)
            sol = solve_ls(bt, lt, ctx)
            rhos.append(residual_rho(bt, lt, sol))
        assert all(b < a for a, b in zip(rhos, rhos[1:]))


class TestErrorNorms:
    def test_zero_solution_gives_exact_norm(self):
        # ||u||_L2 of sin sin is exactly 1/2
        form = make_formulation("primal-dpg", p=1, dp=1)
        case = make_case("poisson-sine")
        mesh = uniform_mesh(4)
        ctx = build_context(mesh, form, case)
        zero = Solution(
            np.zeros(ctx.n_total), "QR", np.zeros(mesh.n_elements), 0.0, 0.0,
            np.zeros(ctx.n_solve), ctx,
        )
        err = error_norms(zero, case, form, mesh)
        assert err["u_l2"] == pytest.approx(0.5, abs=1e-12)

    def test_exact_polynomial_injection(self):
        # quartic solution lies in the p=5 trial space: zero error
        form = make_formulation("fosls-strong", p=5, dp=1)
        case = make_case("poisson-quartic")
        mesh = uniform_mesh(2)
        ctx = build_context(mesh, form, case)
        ui = interpolate_case(ctx, case)
        sol = Solution(ui, "QR", np.zeros(mesh.n_elements), 0.0, 0.0, ui[ctx.solve_ids], ctx)
        err = error_norms(sol, case, form, mesh)
        assert err["u_l2"] <= 1e-12
        assert err["U"] <= 1e-12

    @pytest.mark.parametrize("fname,p", [("ultraweak-dpg", 1), ("ultraweak-dpg", 2),
                                         ("fosls-strong", 1), ("fosls-strong", 2)])
    def test_l2_field_rate(self, fname, p):
        form = make_formulation(fname, p=p, dp=1)
        case = make_case("poisson-sine")
        errs = []
        for n in (4, 8, 16):
            mesh = uniform_mesh(n)
            ctx = build_context(mesh, form, case)
            bt, lt, _ = assemble_overdetermined(ctx)
            sol = solve_ls(bt, lt, ctx)
            errs.append(error_norms(sol, case, form, mesh)["fields_l2_rel"])
        rate = np.polyfit(np.log([4, 8, 16]), np.log(errs), 1)[0]
        assert -rate == pytest.approx(p, abs=0.3)


def test_residual_vector_matches_indicators():
    form = make_formulation("ultraweak-dpg", p=2, dp=1)
    case = make_case("poisson-sine")
    mesh = uniform_mesh(4)
    ctx = build_context(mesh, form, case)
    bt, lt, _ = assemble_overdetermined(ctx)
    sol = solve_ls(bt, lt, ctx)
    assert sol.residual is not None and sol.residual.size == bt.n_rows
    assert np.linalg.norm(sol.residual) == pytest.approx(sol.residual_norm, rel=1e-14)
    # element slices of the residual reproduce eta_K
    for e, rec in enumerate(ctx.records):
        m = rec.cond_ls.rows.shape[0]
        sl = sol.residual[rec.row_offset : rec.row_offset + m]
        assert np.linalg.norm(sl) == pytest.approx(sol.eta[e], rel=1e-10)
