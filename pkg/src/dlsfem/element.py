"""Per-element pipeline: Gram preconditioning, whitening, boundary
modification, and static condensation in least-squares and
normal-equation flavors.

The whitened element system is

    Btilde = L^-1 B,   ltilde = L^-1 l,   L L* = G,

so that the G^-1-weighted element residual becomes an ordinary 2-norm.
Condensation eliminates bubble columns (trial functions supported in a
single element) either by the orthogonal projector I - Q_b Q_b* obtained
from a QR of the bubble block (least-squares flavor) or by the Schur
complement of the element normal equation; Appendix-style equivalence of
the two is covered by the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .linalg import NotPositiveDefinite


class NonpositiveDiagonal(Exception):
    """Diagonal scaling hit a nonpositive entry."""


class RankDeficientBubbles(Exception):
    """Bubble block lost full column rank: the test space is too poor."""


class SingularBubbleBlock(Exception):
    """Bubble block of the element normal equation is not positive definite."""


@dataclass
class ElementSystem:
    """Raw element triple (G_K, B_K, l_K) with its local layout metadata."""

    g: np.ndarray
    b: np.ndarray
    l: np.ndarray


@dataclass
class CondensedElement:
    """Interface-only element rows plus the factors needed for recovery."""

    rows: np.ndarray          # (M, n_interface) projected interface block
    rhs: np.ndarray           # (M,) projected load
    q_bubb: np.ndarray        # (M, n_bubble)
    r_bubb: np.ndarray        # (n_bubble, n_bubble) upper triangular
    b_interf: np.ndarray      # unprojected interface block (for recovery)
    ltilde: np.ndarray        # unprojected load (for recovery)


def precondition_gram(g, b, l):
    """Unit-diagonal rescaling of the Gram matrix, Eq.-(3.16) style.

    G -> D^-1/2 G D^-1/2, B -> D^-1/2 B, l -> D^-1/2 l with D = diag(G).
    The scaling is a pure row transformation of the weighted least-squares
    system: the whitened matrix L^-1 B (and hence the minimizer and the
    normal equation) is unchanged in exact arithmetic, while the Cholesky
    factorization runs on a much better conditioned Gram matrix.

    Returns (g, b, l, d) with d the diagonal that was scaled out.
    """
    g = np.asarray(g)
    d = np.real(np.diag(g)).copy()
    if np.any(d <= 0):
        raise NonpositiveDiagonal("Gram diagonal must be positive")
    s = 1.0 / np.sqrt(d)
    g_s = g * s[:, None] * s[None, :]
    b_s = np.asarray(b) * s[:, None]
    l_s = np.asarray(l) * s
    return g_s, b_s, l_s, d


def whiten(g, b, l):
    """Cholesky whitening: returns (Btilde, ltilde) with G = L L*."""
    ell_factor = linalg.cholesky(np.asarray(g))
    bt = linalg.triangular_solve(ell_factor, np.asarray(b))
    lt = linalg.triangular_solve(ell_factor, np.asarray(l))
    return bt, lt


def element_ne(bt, lt):
    """Element normal equation: A_K = Btilde* Btilde, f_K = Btilde* ltilde."""
    bt = np.asarray(bt)
    return bt.conj().T @ bt, bt.conj().T @ np.asarray(lt)


def apply_dirichlet(bt, lt, fixed_local, lift_local=None):
    """Eliminate fixed columns, moving their lift contribution to the load.

    ``lift_local`` is a full-length local lift vector (entries at free
    positions are allowed and are also moved to the load, which makes the
    solution independent of the particular lift chosen).  Returns
    (bt_free, lt_mod, free_local).
    """
    bt = np.asarray(bt)
    lt = np.asarray(lt).copy()
    n = bt.shape[1]
    fixed_local = np.asarray(fixed_local, dtype=np.int64)
    free = np.setdiff1d(np.arange(n), fixed_local)
    if lift_local is not None and np.any(lift_local != 0):
        lt = lt - bt @ np.asarray(lift_local).astype(lt.dtype)
    return bt[:, free], lt, free


def condense_ls(bt, lt, bubble_idx, interface_idx):
    """Least-squares static condensation via QR of the bubble block.

    The interface rows become (I - Q_b Q_b*) [B_interf | ltilde]; the
    retained factors reproduce the bubble minimizer
    u_b = R_b^-1 Q_b* (ltilde - B_interf u_i).
    """
    bt = np.asarray(bt)
    lt = np.asarray(lt)
    bubble_idx = np.asarray(bubble_idx, dtype=np.int64)
    interface_idx = np.asarray(interface_idx, dtype=np.int64)
    b_bubb = bt[:, bubble_idx]
    b_int = bt[:, interface_idx]
    if bubble_idx.size == 0:
        z = np.zeros((bt.shape[0], 0), dtype=bt.dtype)
        r0 = np.zeros((0, 0), dtype=bt.dtype)
        return CondensedElement(b_int.copy(), lt.copy(), z, r0, b_int, lt)
    qr = linalg.householder_qr(b_bubb)
    diag = np.abs(np.diag(qr.r))
    if diag.size and (
        diag.max() == 0.0
        or diag.min() < bt.shape[0] * linalg.eps(bt.dtype) * diag.max()
    ):
        raise RankDeficientBubbles(
            "bubble block rank deficient (min diag %g)" % diag.min()
        )
    qb = qr.q
    rows = b_int - qb @ (qb.conj().T @ b_int)
    rhs = lt - qb @ (qb.conj().T @ lt)
    return CondensedElement(rows, rhs, qb, qr.r, b_int, lt)


def recover_bubbles(cond: CondensedElement, u_interf):
    """Bubble coefficients minimizing the local residual at fixed interface."""
    if cond.r_bubb.shape[0] == 0:
        return np.zeros(0, dtype=cond.rows.dtype)
    resid = cond.ltilde - cond.b_interf @ np.asarray(u_interf, dtype=cond.rows.dtype)
    return linalg.triangular_solve(
        cond.r_bubb.conj().T, cond.q_bubb.conj().T @ resid, trans="C"
    )


@dataclass
class SchurElement:
    """Schur-complement condensation data of the element normal equation."""

    schur: np.ndarray
    rhs: np.ndarray
    chol_bb: np.ndarray   # Cholesky factor of the bubble block
    a_bi: np.ndarray      # bubble-interface coupling
    f_bubb: np.ndarray


def condense_ne(a, f, bubble_idx, interface_idx):
    """Schur complement of the bubble block of (A_K, f_K)."""
    a = np.asarray(a)
    f = np.asarray(f)
    bubble_idx = np.asarray(bubble_idx, dtype=np.int64)
    interface_idx = np.asarray(interface_idx, dtype=np.int64)
    a_bb = a[np.ix_(bubble_idx, bubble_idx)]
    a_bi = a[np.ix_(bubble_idx, interface_idx)]
    a_ii = a[np.ix_(interface_idx, interface_idx)]
    f_b = f[bubble_idx]
    f_i = f[interface_idx]
    if bubble_idx.size == 0:
        z = np.zeros((0, 0), dtype=a.dtype)
        return SchurElement(a_ii.copy(), f_i.copy(), z, a_bi, f_b)
    try:
        chol = linalg.cholesky(a_bb)
    except NotPositiveDefinite as err:
        raise SingularBubbleBlock(str(err)) from err
    # A_ib A_bb^-1 A_bi via the triangular factor
    y = linalg.triangular_solve(chol, a_bi)
    yf = linalg.triangular_solve(chol, f_b)
    schur = a_ii - y.conj().T @ y
    rhs = f_i - y.conj().T @ yf
    return SchurElement(schur, rhs, chol, a_bi, f_b)


def recover_bubbles_ne(schur_elem: SchurElement, u_interf):
    """Bubble recovery for the Schur flavor: u_b = A_bb^-1 (f_b - A_bi u_i)."""
    if schur_elem.chol_bb.shape[0] == 0:
        return np.zeros(0, dtype=schur_elem.schur.dtype)
    rhs = schur_elem.f_bubb - schur_elem.a_bi @ np.asarray(
        u_interf, dtype=schur_elem.schur.dtype
    )
    y = linalg.triangular_solve(schur_elem.chol_bb, rhs)
    return linalg.triangular_solve(schur_elem.chol_bb, y, trans="C")


def compute_element(form, mesh_obj, elem: int, case, rule) -> ElementSystem:
    """Raw element system (G_K, B_K, l_K) for one mesh element."""
    origin = mesh_obj.element_origin(elem)
    g, b, l = form.eval_forms(mesh_obj.h, rule, origin=origin, case=case)
    return ElementSystem(g=g, b=b, l=l)
