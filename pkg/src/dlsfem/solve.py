"""Global solution paths and post-processing.

``solve_ne`` factors the assembled Hermitian normal equation by Cholesky
(dense at small sizes, banded after a geometric reordering at larger
ones); ``solve_ls`` solves the row-blocked rectangular system by
Householder QR through :mod:`dlsfem.blockqr`.  Both return a
:class:`Solution` with the full coefficient vector (lift re-inserted,
bubbles recovered element by element) and the per-element residual
indicators eta_K.

Constrained variants implement the method of weighting (stacked alpha*C
rows) and the KKT saddle system; they are intended for desk-scale
verification runs and work on densified systems.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import basis, element, linalg
from .assembly import (
    AssemblyContext,
    RectangularRowBlocked,
    SparseSymmetric,
    precondition_global,
    precondition_global_rect,
)
from .blockqr import solve_blocked_ls
from .linalg import NotPositiveDefinite, RankDeficient

DENSE_NE_LIMIT = 2600


class ZeroSolution(Exception):
    """rho requested for an identically zero solution of a zero load."""


@dataclass
class Solution:
    """Solved coefficients with residual bookkeeping.

    ``coefficients`` covers the full trial layout in double precision;
    ``system_vector`` is the raw solution of the assembled (preconditioned)
    system in the working precision; ``residual`` is the whitened global
    residual ltilde - Btilde u in element-row order (the discrete Riesz
    representative of the residual, whose element slices give eta_K).
    """

    coefficients: np.ndarray
    solver: str
    eta: np.ndarray
    residual_norm: float
    galerkin_residual: float
    system_vector: np.ndarray
    context: AssemblyContext
    residual: np.ndarray = None

    def component(self, name: str) -> np.ndarray:
        return self.coefficients[self.context.component_slice(name)]

    @property
    def eta_total(self) -> float:
        return float(np.sqrt(np.sum(self.eta**2)))


def _recover(ctx: AssemblyContext, u_solve: np.ndarray, solver: str) -> np.ndarray:
    """Full coefficient vector: lift plus homogeneous part plus bubbles.

    The element systems were assembled with the full lift moved to the
    load, so the solve and the bubble recovery produce the homogeneous
    part, which is added on top of the lift (the affine-set split).
    """
    out_dtype = np.complex128 if ctx.formulation.field == "complex" else np.float64
    lift = ctx.lift_full.astype(out_dtype)
    full = lift.copy()
    full[ctx.solve_ids] += u_solve.astype(out_dtype)
    if ctx.options.condense:
        square = ctx.square_data is not None
        for rec in ctx.records:
            ids_i = rec.gdofs[rec.free_local[rec.interf_pos]]
            u_i_hom = (full[ids_i] - lift[ids_i]).astype(rec.bt.dtype)
            if solver == "QR" and not square:
                u_b = element.recover_bubbles(rec.cond_ls, u_i_hom)
            else:
                u_b = element.recover_bubbles_ne(rec.cond_ne, u_i_hom)
            ids_b = rec.gdofs[rec.free_local[rec.bubble_pos]]
            full[ids_b] = lift[ids_b] + u_b.astype(out_dtype)
    return full


def _indicators(ctx: AssemblyContext, full: np.ndarray, lt_global=None):
    """Per-element whitened residual norms plus global residual data.

    eta_K is always measured on the uncondensed element system with the
    recovered local coefficients; the global residual norm is taken from
    the system that was actually solved (condensed rows when condensation
    is on), so the sum identity is a genuine cross-check.

    For uncondensed systems a caller-supplied global load vector takes
    precedence over the stored element loads (constraint and consistency
    experiments feed custom right-hand sides); condensed systems are tied
    to the loads they were assembled with, since bubble recovery needs the
    unprojected element load.
    """
    ne = len(ctx.records)
    eta = np.zeros(ne)
    resid_sq = 0.0
    gal = np.zeros(ctx.n_solve, dtype=np.complex128 if ctx.formulation.field == "complex" else np.float64)
    if ctx.square_data is not None:
        # conforming test space: no localizable residual decomposition
        s = ctx.square_data["matrix"]
        rhs = ctx.square_data["rhs"] if lt_global is None else lt_global
        hom = (full - ctx.lift_full)[ctx.solve_ids].astype(s.dtype)
        r = rhs - s @ hom
        return eta, float(np.linalg.norm(r)), float(np.linalg.norm(s.conj().T @ r)), r
    hom_full = full - ctx.lift_full.astype(full.dtype)
    rvecs = []
    for e, rec in enumerate(ctx.records):
        u_free = hom_full[rec.gdofs[rec.free_local]].astype(rec.bt.dtype)
        if ctx.options.condense and rec.cond_ls is not None:
            r = rec.lt - rec.bt @ u_free
            eta[e] = np.linalg.norm(r)
            u_i = hom_full[rec.gdofs[rec.free_local[rec.interf_pos]]].astype(rec.bt.dtype)
            r_sys = rec.cond_ls.rhs - rec.cond_ls.rows @ u_i
            cols = ctx.solve_index[rec.gdofs[rec.free_local[rec.interf_pos]]]
            gal[cols] += rec.cond_ls.rows.conj().T @ r_sys
            resid_sq += float(np.sum(np.abs(r_sys) ** 2))
            rvecs.append(r_sys)
        else:
            lt = rec.lt
            if lt_global is not None:
                lt = lt_global[rec.row_offset : rec.row_offset + rec.bt.shape[0]]
            r = lt - rec.bt @ u_free
            eta[e] = np.linalg.norm(r)
            cols = ctx.solve_index[rec.gdofs[rec.free_local]]
            ok = cols >= 0
            gal[cols[ok]] += (rec.bt.conj().T @ r)[ok]
            resid_sq += float(np.sum(np.abs(r) ** 2))
            rvecs.append(r)
    rvec = np.concatenate(rvecs) if rvecs else np.zeros(0)
    return eta, math.sqrt(resid_sq), float(np.linalg.norm(gal)), rvec


def _banded_cholesky_solve(a: SparseSymmetric, f: np.ndarray, keys: np.ndarray):
    """Cholesky solve after a geometric bandwidth-reducing permutation."""
    order = np.lexsort(tuple(keys[:, k] for k in range(keys.shape[1] - 1, -1, -1)))
    csr = a.matrix.tocsr()
    ap = csr[order][:, order].tocoo()
    i, j, v = ap.row, ap.col, ap.data
    lower = i >= j
    i, j, v = i[lower], j[lower], v[lower]
    bw = int(np.max(i - j)) if i.size else 0
    n = a.n
    ab = np.zeros((bw + 1, n), dtype=v.dtype)
    ab[i - j, j] = v
    try:
        cb = scipy.linalg.cholesky_banded(ab, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as err:
        raise NotPositiveDefinite(str(err)) from err
    x = scipy.linalg.cho_solve_banded((cb, True), f[order], check_finite=False)
    out = np.empty_like(x)
    out[order] = x
    return out


def solve_ne(a: SparseSymmetric, f: np.ndarray, ctx: AssemblyContext, precondition: bool = True) -> Solution:
    """Normal-equation path: A u = f by Cholesky."""
    scale = None
    if precondition and a.n:
        a, f, scale = precondition_global(a, f)
    if a.n == 0:
        u = np.zeros(0, dtype=f.dtype)
    elif a.n <= DENSE_NE_LIMIT:
        u = linalg.solve_spd(a.to_dense(), f)
    else:
        u = _banded_cholesky_solve(a, f, ctx.sort_keys())
    if scale is not None:
        u = u * scale.astype(u.dtype)
    full = _recover(ctx, u, "NE")
    eta, rnorm, gal, rvec = _indicators(ctx, full)
    return Solution(full, "NE", eta, rnorm, gal, u, ctx, rvec)


def solve_ls(bt: RectangularRowBlocked, ltilde: np.ndarray, ctx: AssemblyContext, precondition: bool = True) -> Solution:
    """Least-squares path: min ||Btilde u - ltilde|| by Householder QR."""
    scale = None
    if precondition and bt.n_cols:
        bt, ltilde, scale = precondition_global_rect(bt, ltilde)
    blocks = [(blk.rows, blk.cols) for blk in bt.blocks]
    rhs = [ltilde[blk.offset : blk.offset + blk.rows.shape[0]] for blk in bt.blocks]
    u, _ = solve_blocked_ls(blocks, rhs, bt.n_cols, sort_keys=ctx.sort_keys())
    if scale is not None:
        u = u * scale.astype(u.dtype)
    full = _recover(ctx, u, "QR")
    eta, rnorm, gal, rvec = _indicators(ctx, full, lt_global=ltilde)
    return Solution(full, "QR", eta, rnorm, gal, u, ctx, rvec)


def residual_rho(bt: RectangularRowBlocked, ltilde: np.ndarray, solution: Solution) -> float:
    """rho = ||Btilde u - ltilde|| / (||Btilde||_2 ||u||_2) of Eq.-(3.14) type."""
    u = solution.system_vector.astype(np.complex128 if np.iscomplexobj(ltilde) else np.float64)
    unorm = float(np.linalg.norm(u))
    resid = float(np.linalg.norm(bt.matvec(u) - ltilde))
    if unorm == 0.0 and float(np.linalg.norm(ltilde)) == 0.0:
        raise ZeroSolution("rho undefined for zero solution of zero load")
    # spectral norm by power iteration on Btilde* Btilde (diagnostic only)
    n = bt.n_cols
    rng = np.random.default_rng(1234)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    smax = 0.0
    for _ in range(60):
        y = bt.rmatvec(bt.matvec(x))
        nrm = np.linalg.norm(y)
        if nrm == 0.0:
            break
        x_new = (y / nrm).real.astype(np.float64) if not np.iscomplexobj(y) else y / nrm
        new = math.sqrt(nrm)
        if abs(new - smax) <= 1e-10 * max(new, 1.0):
            smax = new
            break
        smax = new
        x = x_new
    if smax == 0.0:
        raise ZeroSolution("zero operator")
    # loads orthogonal to the range leave u at round-off scale; report the
    # regularized convention +inf rather than a meaningless huge ratio
    if smax * unorm <= 1e-8 * resid:
        return math.inf
    return resid / (smax * unorm)


# ---------------------------------------------------------------------------
# Equality constraints: method of weighting and the KKT saddle system
# ---------------------------------------------------------------------------


@dataclass
class ConstraintSystem:
    """Equality constraints C u = d with penalty Gram H = alpha^-2 I."""

    c: np.ndarray
    d: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        self.c = np.atleast_2d(np.asarray(self.c))
        self.d = np.atleast_1d(np.asarray(self.d))
        if self.c.shape[0]:
            qr = linalg.householder_qr(self.c.conj().T)
            diag = np.abs(np.diag(qr.r))
            if diag.size and diag.min() < self.c.shape[1] * linalg.eps(self.c.dtype) * max(diag.max(), 1.0):
                raise RankDeficient("constraint matrix is not full row rank")


def solve_weighted_constraints(
    bt: RectangularRowBlocked,
    ltilde: np.ndarray,
    cons: ConstraintSystem,
    ctx: AssemblyContext,
) -> Solution:
    """Stacked least-squares [alpha C; Btilde] u ~ [alpha d; ltilde]."""
    dense = bt.to_dense()
    dtype = np.result_type(dense.dtype, cons.c.dtype)
    if cons.alpha == 0.0 or cons.c.shape[0] == 0:
        stack = dense.astype(dtype)
        rhs = ltilde.astype(dtype)
    else:
        stack = np.vstack([(cons.alpha * cons.c).astype(dtype), dense.astype(dtype)])
        rhs = np.concatenate([(cons.alpha * cons.d).astype(dtype), ltilde.astype(dtype)])
    u = linalg.least_squares_qr(stack, rhs)
    full = _recover(ctx, u, "QR")
    eta, rnorm, gal, rvec = _indicators(ctx, full, lt_global=ltilde)
    return Solution(full, "QR", eta, rnorm, gal, u, ctx, rvec)


def solve_saddle_constraints(
    a: SparseSymmetric,
    f: np.ndarray,
    cons: ConstraintSystem,
    ctx: AssemblyContext,
):
    """KKT system [[A, C*], [C, 0]]; returns (Solution, multipliers)."""
    u, w = linalg.saddle_solve(a.to_dense(), cons.c, f, cons.d)
    full = _recover(ctx, u, "NE")
    eta, rnorm, gal, rvec = _indicators(ctx, full)
    return Solution(full, "NE", eta, rnorm, gal, u, ctx, rvec), w


# ---------------------------------------------------------------------------
# Error norms
# ---------------------------------------------------------------------------


def _field_tables(form, comp, rule):
    if comp.kind == "l2":
        return {"values": basis.y_table(comp.p, rule.points)}
    if comp.kind == "h1":
        vals, grads = basis.w_table(comp.p, rule.points)
        return {"values": vals, "grad": grads}
    if comp.kind == "hdiv":
        vals, divs = basis.v_table(comp.p, rule.points)
        return {"values": vals, "div": divs}
    raise ValueError(comp.kind)


def _accumulate_norms(form, mesh_obj, coeffs, ctx_layouts, offsets, rule, exact=None, case=None):
    """Element-quadrature L2/H1/H(div) norms of u_h - u_exact per component."""
    h = mesh_obj.h
    w = rule.weights * h * h
    origins = mesh_obj.element_origins()
    px = origins[:, 0:1] + h * rule.points[None, :, 0]
    py = origins[:, 1:2] + h * rule.points[None, :, 1]
    out = {}
    sig_parts = {}
    for comp, lay, off in zip(form.trial, ctx_layouts, offsets):
        if comp.kind not in ("l2", "h1", "hdiv"):
            continue
        tabs = _field_tables(form, comp, rule)
        call = coeffs[off + lay.element_dofs]  # (ne, nloc)
        if comp.kind in ("l2", "h1"):
            vals_h = np.einsum("ei,ip->ep", call, tabs["values"])
            ex = exact[comp.name](px, py) if exact and comp.name in exact else 0.0
            out[f"{comp.name}_l2"] = math.sqrt(abs(float(np.sum(w * np.abs(vals_h - ex) ** 2))))
            if comp.kind == "h1":
                gx = np.einsum("ei,ip->ep", call, tabs["grad"][:, 0, :]) / h
                gy = np.einsum("ei,ip->ep", call, tabs["grad"][:, 1, :]) / h
                ex_gx = exact["sigx"](px, py) if exact and "sigx" in exact else 0.0
                ex_gy = exact["sigy"](px, py) if exact and "sigy" in exact else 0.0
                semi = float(np.sum(w * (np.abs(gx - ex_gx) ** 2 + np.abs(gy - ex_gy) ** 2)))
                out[f"{comp.name}_h1"] = math.sqrt(abs(out[f"{comp.name}_l2"] ** 2 + semi))
        else:  # hdiv vector component
            vx = np.einsum("ei,ip->ep", call, tabs["values"][:, 0, :]) / h
            vy = np.einsum("ei,ip->ep", call, tabs["values"][:, 1, :]) / h
            dv = np.einsum("ei,ip->ep", call, tabs["div"]) / (h * h)
            ex_x = exact["sigx"](px, py) if exact and "sigx" in exact else 0.0
            ex_y = exact["sigy"](px, py) if exact and "sigy" in exact else 0.0
            if exact is not None and case is not None and case.kind == "poisson":
                ex_d = case.div_sigma(px, py)
            else:
                ex_d = 0.0
            l2sq = float(np.sum(w * (np.abs(vx - ex_x) ** 2 + np.abs(vy - ex_y) ** 2)))
            divsq = float(np.sum(w * np.abs(dv - ex_d) ** 2))
            out[f"{comp.name}_l2"] = math.sqrt(abs(l2sq))
            out[f"{comp.name}_hdiv"] = math.sqrt(abs(l2sq + divsq))
        sig_parts[comp.name] = out[f"{comp.name}_l2"] ** 2
    out["fields_l2"] = math.sqrt(sum(sig_parts.values()))
    if form.name == "fosls-strong":
        out["U"] = math.sqrt(out["u_h1"] ** 2 + out["sigma_hdiv"] ** 2)
    return out


def error_norms(solution: Solution, case, form, mesh_obj, extra_order: int = 2) -> dict:
    """Absolute and relative error norms by element quadrature.

    Uses a rule two orders above the assembly rule.  Relative norms divide
    by the matching norm of the exact solution.
    """
    ctx = solution.context
    rule = basis.gauss_rule(form.quadrature_order + extra_order)
    errs = _accumulate_norms(
        form, mesh_obj, solution.coefficients, ctx.layouts, ctx.offsets, rule,
        exact=case.fields, case=case,
    )
    # norms of the exact solution for normalization: use zero coefficients
    zero = np.zeros_like(solution.coefficients)
    refs = _accumulate_norms(
        form, mesh_obj, zero, ctx.layouts, ctx.offsets, rule, exact=case.fields, case=case
    )
    out = dict(errs)
    for key, val in errs.items():
        ref = refs.get(key, 0.0)
        out[key + "_rel"] = val / ref if ref > 0 else math.inf if val > 0 else 0.0
    return out


def discrete_norms(form, mesh_obj, ctx: AssemblyContext, coeffs: np.ndarray, extra_order: int = 2) -> dict:
    """Norms of a discrete function given by trial coefficients."""
    rule = basis.gauss_rule(form.quadrature_order + extra_order)
    return _accumulate_norms(form, mesh_obj, coeffs, ctx.layouts, ctx.offsets, rule)
