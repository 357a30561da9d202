"""Dense complex linear algebra kernels sized for subspace dimensions.

Everything here works on plain numpy arrays in complex double precision;
real inputs are promoted. All functions are pure: no internal state, safe
to share inputs read-only across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import IndefiniteGramError, InvalidInputError, KrylovError

#: Relative remainder threshold below which orthogonalization declares breakdown.
BREAKDOWN_RTOL = 1e-14

#: Second Gram-Schmidt pass triggers when the remainder drops below this
#: fraction of the input norm (the usual 1/sqrt(2) robustness criterion).
REORTH_THRESHOLD = 1.0 / np.sqrt(2.0)

_EPS = np.finfo(np.float64).eps


def as_vector(v) -> np.ndarray:
    """Promote to a 1-D complex128 array."""
    a = np.asarray(v, dtype=np.complex128)
    if a.ndim != 1:
        raise InvalidInputError(f"expected a vector, got shape {a.shape}")
    return a


def as_matrix(m) -> np.ndarray:
    """Promote to a 2-D complex128 array."""
    a = np.asarray(m, dtype=np.complex128)
    if a.ndim != 2:
        raise InvalidInputError(f"expected a matrix, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class ThinQr:
    """Economy QR factorization with the numerical rank of the input.

    Columns of ``R`` beyond ``rank`` have an exactly zero diagonal entry.
    """

    Q: np.ndarray
    R: np.ndarray
    rank: int


@dataclass(frozen=True)
class LeastSquaresResult:
    solution: np.ndarray
    residual_norm: float
    #: True when the triangular factor was exactly singular and the
    #: minimum-norm solution was substituted.
    singular: bool = False


@dataclass(frozen=True)
class EigenPairs:
    """Eigenvalue estimates with unit-norm eigenvectors and backward errors."""

    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray


def orthonormalize_against(v, basis):
    """Orthogonalize ``v`` against orthonormal columns via modified Gram-Schmidt.

    One conditional reorthogonalization pass runs when the first sweep
    removes more than ``1 - 1/sqrt(2)`` of the input norm.

    Returns ``(coeffs, tail_norm, unit_vector)`` where ``coeffs = basis^H v``
    accumulated over both passes, ``tail_norm`` is the remainder norm, and
    ``unit_vector`` is the normalized remainder or ``None`` on breakdown
    (``tail_norm <= 1e-14 * ||v||``).
    """
    v = as_vector(v)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("orthonormalize_against: non-finite input vector")
    basis = as_matrix(basis)
    if basis.shape[0] != v.shape[0]:
        raise InvalidInputError("orthonormalize_against: dimension mismatch")
    ncols = basis.shape[1]

    norm_in = np.linalg.norm(v)
    s = v.copy()
    coeffs = np.zeros(ncols, dtype=np.complex128)
    for i in range(ncols):
        h = np.vdot(basis[:, i], s)
        coeffs[i] = h
        s -= h * basis[:, i]
    tail = np.linalg.norm(s)

    if ncols and tail < REORTH_THRESHOLD * norm_in:
        for i in range(ncols):
            h = np.vdot(basis[:, i], s)
            coeffs[i] += h
            s -= h * basis[:, i]
        tail = np.linalg.norm(s)

    if tail <= BREAKDOWN_RTOL * norm_in:
        return coeffs, tail, None
    return coeffs, tail, s / tail


def thin_qr(m) -> ThinQr:
    """Economy QR with orthonormal Q, upper triangular R, real nonneg diagonal.

    Rank deficiency is reported through ``rank``; diagonal entries of R that
    fall below ``max(p, q) * eps * ||M||_F`` are zeroed.
    """
    m = as_matrix(m)
    p, q = m.shape
    if p < q:
        raise InvalidInputError(f"thin_qr requires p >= q, got {p}x{q}")
    qf, r = scipy.linalg.qr(m, mode="economic")
    # rotate column phases so diag(R) is real nonnegative
    diag = np.diag(r).copy()
    phases = np.where(np.abs(diag) > 0, diag / np.where(np.abs(diag) > 0, np.abs(diag), 1.0), 1.0)
    qf = qf * phases
    r = r * phases.conj()[:, None]

    tol = max(p, q) * _EPS * np.linalg.norm(m)
    keep = np.abs(np.diag(r)) > tol
    rank = int(np.count_nonzero(keep))
    if rank < q:
        idx = np.where(~keep)[0]
        r[idx, idx] = 0.0
    return ThinQr(qf, r, rank)


def hessenberg_lsq(hbar, c) -> LeastSquaresResult:
    """Minimize ``||c - Hbar y||`` by QR factorization of ``Hbar``.

    ``Hbar`` is (j+1) x j in GMRES use but any p x q with p >= q is accepted;
    the leading block need not be Hessenberg (deflated-restart cycles produce
    a dense leading block). The residual norm is the norm of the rotated
    right-hand side tail, which for a full Hessenberg matrix is exactly the
    magnitude of its last rotated component.
    """
    hbar = as_matrix(hbar)
    c = as_vector(c)
    p, q = hbar.shape
    if q < 1 or p < q or c.shape[0] != p:
        raise InvalidInputError(f"hessenberg_lsq: bad shapes {hbar.shape}, {c.shape}")
    qfull, r = scipy.linalg.qr(hbar)
    t = qfull.conj().T @ c
    diag = np.abs(np.diag(r[:q, :q]))
    if np.any(diag == 0.0):
        y, _, _, _ = np.linalg.lstsq(hbar, c, rcond=None)
        return LeastSquaresResult(y, float(np.linalg.norm(c - hbar @ y)), singular=True)
    y = scipy.linalg.solve_triangular(r[:q, :q], t[:q])
    return LeastSquaresResult(y, float(np.linalg.norm(t[q:])))


def dense_eig(b, order="as-is") -> EigenPairs:
    """All eigenpairs of a small dense matrix.

    Backed by LAPACK's Hessenberg reduction plus shifted QR iteration with
    deflation. ``order`` is one of ``as-is``, ``smallest-modulus``,
    ``largest-modulus``. Vectors are returned with unit Euclidean norm and
    per-pair backward errors ``||B y - theta y||``.
    """
    b = as_matrix(b)
    n = b.shape[0]
    if b.shape[0] != b.shape[1]:
        raise InvalidInputError("dense_eig expects a square matrix")
    if n > 2000:
        raise InvalidInputError("dense_eig is a desk-scale kernel (n <= 2000)")
    if not np.all(np.isfinite(b)):
        raise InvalidInputError("dense_eig: non-finite input")
    try:
        values, vectors = np.linalg.eig(b)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - not reachable at desk scale
        raise KrylovError(f"QR eigensolver did not converge: {exc}") from exc
    vectors = vectors / np.linalg.norm(vectors, axis=0)
    if order == "smallest-modulus":
        perm = np.lexsort((values.imag, values.real, np.abs(values)))
    elif order == "largest-modulus":
        perm = np.lexsort((values.imag, values.real, -np.abs(values)))
    elif order == "as-is":
        perm = np.arange(n)
    else:
        raise InvalidInputError(f"unknown eigenvalue order {order!r}")
    values, vectors = values[perm], vectors[:, perm]
    residuals = np.linalg.norm(b @ vectors - vectors * values, axis=0)
    return EigenPairs(values, vectors, residuals)


def hermitian_solve(g, rhs) -> np.ndarray:
    """Cholesky solve of an HPD Gram matrix against one or many right-hand sides."""
    g = as_matrix(g)
    k = g.shape[0]
    if g.shape[0] != g.shape[1]:
        raise InvalidInputError("hermitian_solve expects a square matrix")
    scale = np.linalg.norm(g)
    if scale > 0 and np.linalg.norm(g - g.conj().T) > 1e-12 * scale:
        raise InvalidInputError("hermitian_solve: matrix is not Hermitian to 1e-12")
    rhs_arr = np.asarray(rhs, dtype=np.complex128)
    if rhs_arr.shape[0] != k:
        raise InvalidInputError("hermitian_solve: right-hand side dimension mismatch")
    try:
        factor = scipy.linalg.cho_factor(g, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise IndefiniteGramError(f"Gram matrix is not positive definite: {exc}") from exc
    pivots = np.diag(factor[0]).real ** 2
    max_diag = np.max(np.diag(g).real) if k else 0.0
    if k and np.min(pivots) <= 1e-14 * max_diag:
        raise IndefiniteGramError(
            "near-zero Cholesky pivot: deflation basis is numerically rank deficient"
        )
    return scipy.linalg.cho_solve(factor, rhs_arr)


class HermitianFactor:
    """Cached Cholesky factorization of an HPD Gram matrix."""

    def __init__(self, g):
        g = as_matrix(g)
        self.matrix = g
        self.k = g.shape[0]
        if self.k:
            # reuse the pivot checks from hermitian_solve once, then cache
            hermitian_solve(g, np.eye(self.k, dtype=np.complex128)[:, :1])
            self._factor = scipy.linalg.cho_factor(g, lower=True)
        else:
            self._factor = None

    def solve(self, rhs) -> np.ndarray:
        rhs_arr = np.asarray(rhs, dtype=np.complex128)
        if self.k == 0:
            return np.zeros_like(rhs_arr)
        return scipy.linalg.cho_solve(self._factor, rhs_arr)
