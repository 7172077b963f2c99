"""Dense linear-algebra kernels used by every other module.

All routines are generic over the scalar field (real or complex) and the
working precision (single or double): they preserve the dtype of their
inputs.  Factorizations are delegated to LAPACK through scipy; this module
adds the contracts the rest of the library relies on (Hermitian checks,
deterministic QR phases, rank diagnostics, typed failures).

Condition numbers are diagnostics, not part of any solve path, and are
always evaluated in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class NotPositiveDefinite(Exception):
    """Cholesky hit a nonpositive pivot: the matrix is not HPD."""


class SingularTriangular(Exception):
    """Triangular solve with a zero diagonal entry."""


class RankDeficient(Exception):
    """Least-squares matrix is numerically rank deficient."""


class ZeroMatrix(Exception):
    """Condition number of an all-zero matrix was requested."""


class SingularSaddle(Exception):
    """KKT system is singular or violates the well-posedness conditions."""


def eps(dtype) -> float:
    """Machine epsilon of the real type underlying ``dtype``."""
    return float(np.finfo(np.dtype(dtype)).eps)


def is_complex(dtype) -> bool:
    return np.issubdtype(np.dtype(dtype), np.complexfloating)


def fro(m) -> float:
    return float(np.linalg.norm(np.asarray(m)))


def hermitian_defect(g) -> float:
    """Relative Frobenius distance of ``g`` from its conjugate transpose."""
    g = np.asarray(g)
    scale = fro(g)
    if scale == 0.0:
        return 0.0
    return fro(g - g.conj().T) / scale


def cholesky(g: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L L* = g for Hermitian positive-definite g.

    Raises NotPositiveDefinite on a nonpositive pivot, which in this library
    signals a broken or ill-posed test inner product.
    """
    g = np.asarray(g)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ValueError("cholesky expects a square matrix")
    if hermitian_defect(g) > 100.0 * eps(g.dtype):
        raise ValueError("matrix is not Hermitian to working tolerance")
    if g.shape[0] == 0:
        return g.copy()
    try:
        return scipy.linalg.cholesky(g, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as err:
        raise NotPositiveDefinite(str(err)) from err


def triangular_solve(ell: np.ndarray, m: np.ndarray, trans: str = "N") -> np.ndarray:
    """Solve L X = M (or L* X = M with ``trans='C'``) for lower-triangular L."""
    ell = np.asarray(ell)
    m = np.asarray(m)
    if ell.shape[0] != ell.shape[1]:
        raise ValueError("triangular factor must be square")
    if np.any(np.diag(ell) == 0):
        raise SingularTriangular("zero diagonal entry in triangular factor")
    if ell.shape[0] == 0:
        return m.copy()
    vec = m.ndim == 1
    rhs = m[:, None] if vec else m
    x = scipy.linalg.solve_triangular(
        ell, rhs, lower=True, trans=0 if trans == "N" else 2, check_finite=False
    )
    return x[:, 0] if vec else x


@dataclass
class QrFactors:
    """Economic QR factors: q has orthonormal columns, r is upper triangular.

    The diagonal of r is real and nonnegative (reflector phases are
    normalized away) so factors are deterministic and easy to cross-check.
    """

    q: np.ndarray
    r: np.ndarray


def householder_qr(m: np.ndarray) -> QrFactors:
    """Householder QR of an m-by-n matrix with m >= n, without pivoting."""
    m = np.asarray(m)
    rows, cols = m.shape
    if rows < cols:
        raise ValueError("householder_qr expects rows >= cols")
    if cols == 0:
        return QrFactors(np.zeros((rows, 0), dtype=m.dtype), np.zeros((0, 0), dtype=m.dtype))
    q, r = scipy.linalg.qr(m, mode="economic", check_finite=False)
    # normalize so diag(r) >= 0
    d = np.diag(r).copy()
    phase = np.where(np.abs(d) == 0, 1.0, d / np.where(np.abs(d) == 0, 1.0, np.abs(d)))
    q = q * phase[None, :]
    r = r * np.conj(phase)[:, None]
    return QrFactors(q=q, r=r)


def least_squares_qr(m: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimizer of ||M x - b||_2 via Householder QR, M full column rank.

    Rank is diagnosed from the R diagonal: any |R_kk| below
    rows * eps * |R_11| raises RankDeficient.
    """
    m = np.asarray(m)
    b = np.asarray(b)
    qr = householder_qr(m)
    diag = np.abs(np.diag(qr.r))
    if diag.size:
        threshold = m.shape[0] * eps(m.dtype) * diag[0]
        if np.any(diag < threshold):
            raise RankDeficient(
                "R diagonal below %g (min %g)" % (threshold, diag.min())
            )
    return triangular_solve(qr.r.conj().T, qr.q.conj().T @ b, trans="C")


def solve_spd(a: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Solve A u = f for Hermitian positive-definite A by Cholesky."""
    ell = cholesky(a)
    y = triangular_solve(ell, f)
    return triangular_solve(ell, y, trans="C")


def singular_values(m: np.ndarray) -> np.ndarray:
    """Descending singular values of ``m``, computed in double precision.

    Hermitian inputs use their own eigendecomposition (sigma = |lambda|),
    which keeps sigma_min accurate for products like B*B whose explicit
    squaring would otherwise drown the small singular values in round-off.
    Non-Hermitian (or rectangular) inputs use the symmetric
    eigendecomposition of M*M.
    """
    m = np.asarray(m)
    md = m.astype(np.complex128 if is_complex(m.dtype) else np.float64)
    if md.shape[0] == md.shape[1] and hermitian_defect(md) <= 1e-12:
        sig = np.abs(np.linalg.eigvalsh(md))
    else:
        gram = md.conj().T @ md
        lam = np.linalg.eigvalsh(gram)
        sig = np.sqrt(np.clip(lam, 0.0, None))
    return np.sort(sig)[::-1]


def condition_number(m: np.ndarray) -> float:
    """sigma_1 / sigma_R over the nonzero singular values of ``m``."""
    m = np.asarray(m)
    if m.size == 0 or fro(m) == 0.0:
        raise ZeroMatrix("condition number of a zero matrix")
    sig = singular_values(m)
    tol = sig[0] * max(m.shape) * eps(np.float64)
    nonzero = sig[sig > tol]
    return float(sig[0] / nonzero[-1])


def saddle_solve(a, c, f, d):
    """Solve the KKT system [[A, C*], [C, 0]] [u; w] = [f; d].

    A is Hermitian N x N, C is L x N with full row rank and
    Null(A) and Null(C) intersecting only in zero.  With an empty C this
    reduces to solve_spd.
    """
    a = np.asarray(a)
    c = np.asarray(c)
    f = np.asarray(f)
    n = a.shape[0]
    ell = c.shape[0] if c.size else 0
    if ell == 0:
        return solve_spd(a, f), np.zeros(0, dtype=a.dtype)
    d = np.asarray(d)
    dtype = np.result_type(a.dtype, c.dtype, f.dtype, d.dtype)
    kkt = np.zeros((n + ell, n + ell), dtype=dtype)
    kkt[:n, :n] = a
    kkt[:n, n:] = c.conj().T
    kkt[n:, :n] = c
    rhs = np.concatenate([f.astype(dtype), d.astype(dtype)])
    try:
        sol = scipy.linalg.solve(kkt, rhs, check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError) as err:
        raise SingularSaddle(str(err)) from err
    scale = fro(kkt) * max(fro(rhs), 1.0)
    if fro(kkt @ sol - rhs) > 1000.0 * eps(dtype) * max(scale, 1.0):
        raise SingularSaddle("block residual exceeds well-posedness tolerance")
    return sol[:n], sol[n:]
