"""Deflated minimum-residual solvers for non-Hermitian systems.

All projector algebra flows through the cached image block ``AW``; the
operator never needs an adjoint action since ``W^H A^H = (A W)^H``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .dense import HermitianFactor, as_matrix, as_vector
from .errors import BreakdownError, InvalidInputError, SingularOperatorError
from .gmres import SolveConfig, SolveReport, fgmres_solve
from .operators import OperatorHandle

__all__ = [
    "OrthoDeflation",
    "ObliqueDeflation",
    "EquivalenceProjectors",
    "apply_ortho_projectors",
    "deflated_gmres_ortho",
    "deflated_gmres_oblique",
    "spectral_translation",
    "augmented_deflated_equivalence",
]


def _image_block(a: OperatorHandle, w: np.ndarray) -> np.ndarray:
    return np.column_stack([a.apply(w[:, i]) for i in range(w.shape[1])])


@dataclass
class OrthoDeflation:
    """Basis W with cached AW and the Cholesky factor of (AW)^H (AW).

    Supports the orthogonal projector pair: P1 = I - AW G^{-1} (AW)^H onto
    the orthogonal complement of range(AW), and P2 = I - W G^{-1} (AW)^H A
    onto the complement of range(W), with A P2 = P1 A.
    """

    w: np.ndarray
    aw: np.ndarray
    gram: HermitianFactor = field(repr=False)

    @classmethod
    def build(cls, a: OperatorHandle, w) -> "OrthoDeflation":
        w = as_matrix(w)
        if w.shape[0] != a.dim or w.shape[1] >= a.dim:
            raise InvalidInputError("deflation basis must be n x k with k < n")
        aw = _image_block(a, w)
        return cls(w, aw, HermitianFactor(aw.conj().T @ aw))

    @property
    def k(self) -> int:
        return self.w.shape[1]


def apply_ortho_projectors(d: OrthoDeflation, which: str, x, a: Optional[OperatorHandle] = None):
    """Matrix-free action of Q1, P1 or P2 through the cached AW block.

    P2 needs the operator action on x; pass ``a`` for it.
    """
    x = as_vector(x)
    if which == "Q1":
        return d.aw @ d.gram.solve(d.aw.conj().T @ x)
    if which == "P1":
        return x - d.aw @ d.gram.solve(d.aw.conj().T @ x)
    if which == "P2":
        if a is None:
            raise InvalidInputError("P2 needs the operator handle")
        return x - d.w @ d.gram.solve(d.aw.conj().T @ a.apply(x))
    raise InvalidInputError(f"unknown projector {which!r}")


def deflated_gmres_ortho(
    a: OperatorHandle,
    w,
    b,
    config: SolveConfig,
    x0=None,
) -> SolveReport:
    """GMRES on the consistent singular system ``P1 A xh = P1 b``.

    The range(W) component of the solution comes from the small Gram solve;
    the final iterate is ``W G^{-1} (AW)^H b + P2 xh``. The report carries
    the true residual of the original system, which coincides with the
    deflated residual. An Arnoldi breakdown with a nonzero least-squares
    residual marks the singular-system breakdown case in the report.
    """
    d = OrthoDeflation.build(a, as_matrix(w)) if np.asarray(w).size else None
    b = as_vector(b)
    if d is None:
        return fgmres_solve(a, b, config, x0=x0)

    def deflected(x):
        return apply_ortho_projectors(d, "P1", a.apply(x))

    inner_op = OperatorHandle(a.dim, deflected)
    pb = apply_ortho_projectors(d, "P1", b)
    report = fgmres_solve(inner_op, pb, config, x0=x0)
    xh = report.solution

    w_coef = d.gram.solve(d.aw.conj().T @ b)
    x = d.w @ w_coef + apply_ortho_projectors(d, "P2", xh, a)
    bnorm = np.linalg.norm(b)
    final = float(np.linalg.norm(b - a.apply(x)) / bnorm) if bnorm else 0.0
    return SolveReport(
        x,
        final <= config.tol,
        report.iterations,
        final,
        report.history,
        breakdown=report.breakdown,
        snapshot=report.snapshot,
    )


@dataclass
class ObliqueDeflation:
    """Bases (W, Wt) with cached AW and a factorization of E = Wt^H A W.

    The deflation projector pair follows the oblique decomposition: Q2
    projects onto range(AW) along the orthogonal complement of range(Wt),
    and P3 = I - Q2 projects onto that complement.
    """

    w: np.ndarray
    wt: np.ndarray
    aw: np.ndarray
    lu: tuple = field(repr=False)

    @classmethod
    def build(cls, a: OperatorHandle, w, wt) -> "ObliqueDeflation":
        w, wt = as_matrix(w), as_matrix(wt)
        if w.shape != wt.shape or w.shape[0] != a.dim:
            raise InvalidInputError("oblique deflation needs two n x k bases")
        aw = _image_block(a, w)
        e = wt.conj().T @ aw
        try:
            lu = scipy.linalg.lu_factor(e)
        except scipy.linalg.LinAlgError as exc:
            raise SingularOperatorError(f"coupling block Wt^H A W is singular: {exc}") from exc
        if np.any(np.abs(np.diag(lu[0])) <= 1e-14 * max(np.abs(e).max(), 1e-300)):
            raise SingularOperatorError("coupling block Wt^H A W is numerically singular")
        return cls(w, wt, aw, lu)

    @property
    def k(self) -> int:
        return self.w.shape[1]

    def e_solve(self, rhs):
        return scipy.linalg.lu_solve(self.lu, rhs)

    def apply_q2(self, x):
        return self.aw @ self.e_solve(self.wt.conj().T @ x)

    def apply_p3(self, x):
        return x - self.apply_q2(x)


def deflated_gmres_oblique(
    a: OperatorHandle,
    w,
    wt,
    b,
    config: SolveConfig,
    x0=None,
) -> SolveReport:
    """GMRES on ``P3 A P3 x = P3 r0`` with the Krylov space confined to the
    orthogonal complement of range(Wt).

    The outer correction ``W E^{-1} Wt^H (b - A(x0 + P3 xh))`` annihilates
    the Wt-component of the residual and lands the iterate in
    ``x0 + K_m(P3 A P3, P3 r0) + range(W)``.
    """
    b = as_vector(b)
    w_arr = np.asarray(w)
    if w_arr.size == 0:
        return fgmres_solve(a, b, config, x0=x0)
    d = ObliqueDeflation.build(a, w, wt)
    x0 = np.zeros(a.dim, dtype=np.complex128) if x0 is None else as_vector(x0)
    r0 = b - a.apply(x0)

    def deflected(x):
        return d.apply_p3(a.apply(d.apply_p3(x)))

    inner_op = OperatorHandle(a.dim, deflected)
    rhat = d.apply_p3(r0)
    inner = fgmres_solve(inner_op, rhat, config)

    x_half = x0 + d.apply_p3(inner.solution)
    rho = b - a.apply(x_half)
    x = x_half + d.w @ d.e_solve(d.wt.conj().T @ rho)
    bnorm = np.linalg.norm(b)
    final = float(np.linalg.norm(b - a.apply(x)) / bnorm) if bnorm else 0.0
    return SolveReport(
        x,
        final <= config.tol,
        inner.iterations,
        final,
        inner.history,
        breakdown=inner.breakdown,
        snapshot=inner.snapshot,
    )


def spectral_translation(a: OperatorHandle, u, wl) -> OperatorHandle:
    """Action of ``A (I + u_1 w_1^H) ... (I + u_k w_k^H)``, never formed densely.

    With right eigenvectors ``u_j`` and left eigenvectors scaled as
    ``w_j = (sigma_j / lambda_j - 1) y_j`` (``y_j^H u_j = 1``), the
    eigenvalues ``lambda_j`` move to ``sigma_j`` and the rest stay put.
    """
    u = as_matrix(u) if np.asarray(u).size else np.zeros((a.dim, 0), np.complex128)
    wl = as_matrix(wl) if np.asarray(wl).size else np.zeros((a.dim, 0), np.complex128)
    if u.shape != wl.shape or (u.size and u.shape[0] != a.dim):
        raise InvalidInputError("translation needs paired n x k vector blocks")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(wl))):
        raise InvalidInputError("translation factors must be finite")
    k = u.shape[1]

    def translated(x):
        y = np.asarray(x, dtype=np.complex128)
        for j in range(k - 1, -1, -1):
            y = y + u[:, j] * np.vdot(wl[:, j], y)
        return a.apply(y)

    return OperatorHandle(a.dim, translated, hermitian=False)


@dataclass
class EquivalenceProjectors:
    """W with cached AW and Cholesky of W^H A^H A W = (AW)^H (AW).

    Q3 = W G^{-1} W^H; P4 = I - Q3 A^H A and P5 = I - A Q3 A^H are the
    orthogonal projectors tying augmented to deflated iterates.
    """

    w: np.ndarray
    aw: np.ndarray
    gram: HermitianFactor = field(repr=False)

    @classmethod
    def build(cls, a: OperatorHandle, w) -> "EquivalenceProjectors":
        w = as_matrix(w)
        aw = _image_block(a, w)
        return cls(w, aw, HermitianFactor(aw.conj().T @ aw))

    def apply_q3_ah(self, x):
        """Q3 A^H x evaluated as W G^{-1} (AW)^H x."""
        return self.w @ self.gram.solve(self.aw.conj().T @ x)

    def apply_p4(self, x, a: OperatorHandle):
        return x - self.w @ self.gram.solve(self.aw.conj().T @ a.apply(x))

    def apply_p5(self, x):
        return x - self.aw @ self.gram.solve(self.aw.conj().T @ x)


@dataclass
class EquivalenceReport:
    x_augmented: np.ndarray
    x_deflated: np.ndarray
    max_diff: float
    residual_diff: float


def augmented_deflated_equivalence(
    a: OperatorHandle,
    w,
    b,
    m_steps: int,
    x0=None,
) -> EquivalenceReport:
    """Solve one cycle both ways and compare (augmentation vs deflation).

    Both routes share the Krylov space ``K_m(P5 A, P5 r0)``. The augmented
    route minimizes the true residual over ``x0 + range(W) + K_m`` (dense
    least squares at verification scale); the deflated route runs the
    minimization on the projected system and applies the closed-form
    correction ``x = P4 x_tilde + Q3 A^H b``.
    """
    b = as_vector(b)
    x0 = np.zeros(a.dim, dtype=np.complex128) if x0 is None else as_vector(x0)
    w = as_matrix(w) if np.asarray(w).size else np.zeros((a.dim, 0), np.complex128)
    r0 = b - a.apply(x0)

    if w.shape[1] == 0:
        config = SolveConfig(restart=m_steps, tol=1e-14, max_cycles=1)
        rep = fgmres_solve(a, b, config, x0=x0)
        return EquivalenceReport(rep.solution, rep.solution, 0.0, 0.0)

    eq = EquivalenceProjectors.build(a, w)

    def deflated_action(x):
        return eq.apply_p5(a.apply(x))

    # shared Krylov basis of K_m(P5 A, P5 r0)
    rhat = eq.apply_p5(r0)
    basis = np.zeros((a.dim, m_steps), dtype=np.complex128)
    v = rhat / np.linalg.norm(rhat)
    cols = 0
    for j in range(m_steps):
        basis[:, j] = v
        cols = j + 1
        s = deflated_action(v)
        for i in range(cols):
            s = s - basis[:, i] * np.vdot(basis[:, i], s)
        nrm = np.linalg.norm(s)
        if nrm <= 1e-14:
            break
        v = s / nrm
    km = basis[:, :cols]

    # augmented route: minimum residual over x0 + [W, Km]
    span = np.column_stack([w, km])
    images = _image_block(a, span)
    coef, *_ = np.linalg.lstsq(images, r0, rcond=None)
    x_aug = x0 + span @ coef

    # deflated route: Petrov-Galerkin on P5(b - A xt) against A Km
    akm = _image_block(a, km)
    p5akm = np.column_stack([eq.apply_p5(akm[:, i]) for i in range(cols)])
    y, *_ = np.linalg.lstsq(p5akm, rhat, rcond=None)
    xt = x0 + km @ y
    x_defl = eq.apply_p4(xt, a) + eq.apply_q3_ah(b)

    r_aug = b - a.apply(x_aug)
    r_defl = b - a.apply(x_defl)
    scale = max(np.linalg.norm(x_aug), 1e-300)
    return EquivalenceReport(
        x_aug,
        x_defl,
        float(np.linalg.norm(x_aug - x_defl) / scale),
        float(np.linalg.norm(r_aug - r_defl) / max(np.linalg.norm(b), 1e-300)),
    )
