"""Conjugate gradient family for Hermitian positive definite systems.

Covers plain (optionally preconditioned) CG, augmented CG through the
deflated-Lanczos short recurrences, deflated CG on the projected consistent
system, and the two spectral preconditioners built from an approximate
invariant basis. The deflated operator is never formed; every occurrence of
``W^H A`` is evaluated through the cached image block ``A W``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .dense import HermitianFactor, as_matrix, as_vector
from .errors import (
    InvalidInputError,
    KrylovError,
    NotHpdError,
    SingularOperatorError,
)
from .gmres import ConvergenceHistory
from .operators import OperatorHandle, PreconditionerHandle, to_dense


@dataclass
class AugBasis:
    """Deflation/augmentation basis with cached images and Gram factor."""

    w: np.ndarray
    aw: np.ndarray
    gram: HermitianFactor = field(repr=False)

    @classmethod
    def build(cls, a: OperatorHandle, w) -> "AugBasis":
        w = as_matrix(w)
        if w.shape[0] != a.dim:
            raise InvalidInputError("basis rows must match the operator dimension")
        aw = np.column_stack([a.apply(w[:, i]) for i in range(w.shape[1])]) if w.shape[1] else np.zeros_like(w)
        g = w.conj().T @ aw
        g = (g + g.conj().T) / 2.0
        return cls(w, aw, HermitianFactor(g))

    @property
    def k(self) -> int:
        return self.w.shape[1]


def apply_p6(basis: AugBasis, x):
    """Oblique projector along range(W): x - W (W^H A W)^{-1} (A W)^H x."""
    return as_vector(x) - basis.w @ basis.gram.solve(basis.aw.conj().T @ as_vector(x))


def apply_p6h(basis: AugBasis, x):
    """Adjoint projector: x - A W (W^H A W)^{-1} W^H x."""
    return as_vector(x) - basis.aw @ basis.gram.solve(basis.w.conj().T @ as_vector(x))


@dataclass
class LanczosData:
    """CG coefficients recast as Lanczos data for spectral harvesting."""

    alphas: List[float]
    betas: List[float]
    vectors: np.ndarray  # n x m normalized residuals with alternating sign

    def tridiagonal(self) -> np.ndarray:
        m = self.vectors.shape[1]
        t = np.zeros((m, m))
        for j in range(m):
            t[j, j] = 1.0 / self.alphas[j]
            if j > 0:
                t[j, j] += self.betas[j - 1] / self.alphas[j - 1]
            if j + 1 < m:
                t[j, j + 1] = t[j + 1, j] = np.sqrt(self.betas[j]) / self.alphas[j]
        return t


@dataclass
class CgReport:
    solution: np.ndarray
    converged: bool
    iterations: int
    final_relres: float
    history: ConvergenceHistory
    a_norm_errors: Optional[List[float]] = None
    residual_orthogonality: Optional[float] = None
    direction_orthogonality: Optional[float] = None
    basis_orthogonality: Optional[float] = None
    lanczos: Optional[LanczosData] = None


def cg_bound(kappa: float, ell: int) -> float:
    """The classical CG error-bound factor ``2 ((sqrt(k)-1)/(sqrt(k)+1))^l``."""
    if kappa < 1.0:
        raise InvalidInputError("condition number must be >= 1")
    rk = np.sqrt(kappa)
    return 2.0 * ((rk - 1.0) / (rk + 1.0)) ** ell


def _hpd_step_scalar(p, ap):
    value = np.vdot(p, ap)
    scale = np.linalg.norm(p) * np.linalg.norm(ap)
    if abs(value.imag) > 1e-8 * max(scale, 1e-300) or value.real <= 0.0:
        raise NotHpdError(f"p^H A p = {value:.3e}; operator is not HPD")
    return value.real


def _anorm_error(a, x, x_star):
    e = x - x_star
    return float(np.sqrt(max(np.vdot(e, a.apply(e)).real, 0.0)))


def cg_solve(
    a: OperatorHandle,
    b,
    x0=None,
    tol: float = 1e-8,
    maxiter: Optional[int] = None,
    m: Optional[PreconditionerHandle] = None,
    x_star=None,
    keep_lanczos: int = 0,
    check_window: int = 0,
) -> CgReport:
    """Preconditioned conjugate gradient with coupled two-term recurrences.

    ``x_star`` switches on the A-norm error history (test mode);
    ``keep_lanczos`` retains that many normalized residuals plus the
    tridiagonal coefficients for later spectral harvesting (identity
    preconditioner only); ``check_window`` records the worst normalized
    residual inner product over a sliding window.
    """
    if not a.hermitian:
        raise InvalidInputError("cg_solve needs an operator claiming Hermitian")
    b = as_vector(b)
    x = np.zeros(a.dim, dtype=np.complex128) if x0 is None else as_vector(x0).copy()
    maxiter = 2 * a.dim if maxiter is None else maxiter
    if keep_lanczos and m is not None:
        raise InvalidInputError("lanczos retention requires the unpreconditioned path")

    bnorm = np.linalg.norm(b)
    history = ConvergenceHistory()
    if bnorm == 0.0:
        history.relres.append(0.0)
        return CgReport(x * 0.0, True, 0, 0.0, history)

    r = b - a.apply(x)
    z = m.apply(r) if m is not None else r
    p = z.copy()
    rz = np.vdot(r, z)
    history.relres.append(float(np.linalg.norm(r) / bnorm))

    errors = [_anorm_error(a, x, x_star)] if x_star is not None else None
    lanczos_alphas, lanczos_betas = [], []
    lanczos_vecs = []
    if keep_lanczos:
        lanczos_vecs.append(r / np.linalg.norm(r))
    window = []
    worst_window = 0.0
    if check_window:
        window.append(r / np.linalg.norm(r))

    iterations = 0
    converged = history.relres[0] <= tol
    for it in range(maxiter):
        if converged:
            break
        ap = a.apply(p)
        pap = _hpd_step_scalar(p, ap)
        alpha = rz / pap
        x = x + alpha * p
        r = r - alpha * ap
        iterations = it + 1
        relres = float(np.linalg.norm(r) / bnorm)
        history.relres.append(relres)
        if errors is not None:
            errors.append(_anorm_error(a, x, x_star))
        z = m.apply(r) if m is not None else r
        rz_new = np.vdot(r, z)
        beta = rz_new / rz
        if keep_lanczos:
            lanczos_alphas.append(alpha.real)
            lanczos_betas.append(beta.real)
            if len(lanczos_vecs) < keep_lanczos and relres > 0:
                lanczos_vecs.append((-1) ** len(lanczos_vecs) * r / np.linalg.norm(r))
        if check_window and relres > 0:
            rn = r / np.linalg.norm(r)
            for prev in window:
                worst_window = max(worst_window, abs(np.vdot(prev, rn)))
            window.append(rn)
            if len(window) > check_window:
                window.pop(0)
        rz = rz_new
        p = z + beta * p
        if relres <= tol:
            converged = True

    final = float(np.linalg.norm(b - a.apply(x)) / bnorm)
    lanczos = None
    if keep_lanczos and lanczos_vecs:
        mdim = min(len(lanczos_vecs), len(lanczos_alphas))
        if mdim:
            lanczos = LanczosData(
                lanczos_alphas[:mdim], lanczos_betas[:mdim], np.column_stack(lanczos_vecs[:mdim])
            )
    return CgReport(
        x,
        converged or final <= tol,
        iterations,
        final,
        history,
        a_norm_errors=errors,
        residual_orthogonality=worst_window if check_window else None,
        lanczos=lanczos,
    )


def project_initial_guess(x_prev, a: OperatorHandle, basis: AugBasis, b):
    """Shift ``x_prev`` so the residual is orthogonal to range(W)."""
    x_prev = np.zeros(a.dim, dtype=np.complex128) if x_prev is None else as_vector(x_prev)
    if basis.k == 0:
        return x_prev.copy()
    r = as_vector(b) - a.apply(x_prev)
    return x_prev + basis.w @ basis.gram.solve(basis.w.conj().T @ r)


def augmented_cg_solve(
    a: OperatorHandle,
    b,
    basis: AugBasis,
    x_prev=None,
    tol: float = 1e-8,
    maxiter: Optional[int] = None,
    x_star=None,
    keep_lanczos: int = 0,
    track_orthogonality: bool = False,
) -> CgReport:
    """Augmented CG over ``range(W) + K_m`` via the deflated-Lanczos recurrences.

    The initial guess is projected so ``r0`` is orthogonal to W; each search
    direction gets the extra correction ``-W mu_j`` with
    ``mu_j = (W^H A W)^{-1} W^H A r_j`` and stays A-orthogonal to W.
    """
    if not a.hermitian:
        raise InvalidInputError("augmented CG needs a Hermitian operator")
    b = as_vector(b)
    if basis.k == 0:
        return cg_solve(a, b, x0=x_prev, tol=tol, maxiter=maxiter, x_star=x_star,
                        keep_lanczos=keep_lanczos)
    maxiter = 2 * a.dim if maxiter is None else maxiter
    bnorm = np.linalg.norm(b)
    history = ConvergenceHistory()
    if bnorm == 0.0:
        history.relres.append(0.0)
        return CgReport(np.zeros(a.dim, np.complex128), True, 0, 0.0, history)

    x = project_initial_guess(x_prev, a, basis, b)
    r = b - a.apply(x)
    mu = basis.gram.solve(basis.aw.conj().T @ r)
    p = r - basis.w @ mu
    rr = np.vdot(r, r).real
    history.relres.append(float(np.sqrt(rr) / bnorm))

    errors = [_anorm_error(a, x, x_star)] if x_star is not None else None
    directions = [] if track_orthogonality else None
    lanczos_alphas, lanczos_betas, lanczos_vecs = [], [], []
    if keep_lanczos and rr > 0:
        lanczos_vecs.append(r / np.sqrt(rr))

    iterations = 0
    converged = history.relres[0] <= tol
    worst_dir = 0.0
    worst_wdir = 0.0
    for it in range(maxiter):
        if converged:
            break
        ap = a.apply(p)
        pap = _hpd_step_scalar(p, ap)
        if directions is not None:
            for q, aq in directions:
                worst_dir = max(worst_dir, abs(np.vdot(q, ap)) / np.sqrt(pap * np.vdot(q, aq).real))
            worst_wdir = max(
                worst_wdir,
                float(np.linalg.norm(basis.aw.conj().T @ p) / np.sqrt(pap) / max(np.linalg.norm(basis.aw), 1e-300)),
            )
            directions.append((p.copy(), ap.copy()))
        alpha = rr / pap
        x = x + alpha * p
        r = r - alpha * ap
        iterations = it + 1
        rr_new = np.vdot(r, r).real
        relres = float(np.sqrt(rr_new) / bnorm)
        history.relres.append(relres)
        if errors is not None:
            errors.append(_anorm_error(a, x, x_star))
        beta = rr_new / rr
        if keep_lanczos:
            lanczos_alphas.append(alpha)
            lanczos_betas.append(beta)
            if len(lanczos_vecs) < keep_lanczos and relres > 0:
                lanczos_vecs.append((-1) ** len(lanczos_vecs) * r / np.sqrt(rr_new))
        rr = rr_new
        mu = basis.gram.solve(basis.aw.conj().T @ r)
        p = r + beta * p - basis.w @ mu
        if relres <= tol:
            converged = True

    final = float(np.linalg.norm(b - a.apply(x)) / bnorm)
    lanczos = None
    if keep_lanczos and lanczos_vecs and lanczos_alphas:
        mdim = min(len(lanczos_vecs), len(lanczos_alphas))
        lanczos = LanczosData(
            [al.real if hasattr(al, "real") else al for al in lanczos_alphas[:mdim]],
            [be.real if hasattr(be, "real") else be for be in lanczos_betas[:mdim]],
            np.column_stack(lanczos_vecs[:mdim]),
        )
    return CgReport(
        x,
        converged or final <= tol,
        iterations,
        final,
        history,
        a_norm_errors=errors,
        direction_orthogonality=worst_dir if track_orthogonality else None,
        basis_orthogonality=worst_wdir if track_orthogonality else None,
        lanczos=lanczos,
    )


def deflated_cg_solve(
    a: OperatorHandle,
    b,
    basis: AugBasis,
    tol: float = 1e-8,
    maxiter: Optional[int] = None,
    x_star=None,
) -> CgReport:
    """Deflated CG: the W-component by a small Gram solve, the rest by CG on
    the consistent positive semidefinite projected system.

    The projected residuals never leave the orthogonal complement of W, so
    the zero eigenvalues stay out of the iteration.
    """
    if not a.hermitian:
        raise InvalidInputError("deflated CG needs a Hermitian operator")
    b = as_vector(b)
    if basis.k == 0:
        return cg_solve(a, b, tol=tol, maxiter=maxiter, x_star=x_star)
    maxiter = 2 * a.dim if maxiter is None else maxiter
    bnorm = np.linalg.norm(b)
    history = ConvergenceHistory()
    if bnorm == 0.0:
        history.relres.append(0.0)
        return CgReport(np.zeros(a.dim, np.complex128), True, 0, 0.0, history)

    w_part = basis.w @ basis.gram.solve(basis.w.conj().T @ b)

    def projected(v):
        av = a.apply(v)
        return av - basis.aw @ basis.gram.solve(basis.w.conj().T @ av)

    rhs = b - basis.aw @ basis.gram.solve(basis.w.conj().T @ b)
    xh = np.zeros(a.dim, dtype=np.complex128)
    r = rhs.copy()
    p = r.copy()
    rr = np.vdot(r, r).real
    history.relres.append(float(np.sqrt(rr) / bnorm))
    errors = [_anorm_error(a, w_part + apply_p6(basis, xh), x_star)] if x_star is not None else None

    iterations = 0
    converged = history.relres[0] <= tol
    for it in range(maxiter):
        if converged:
            break
        ap = projected(p)
        pap = _hpd_step_scalar(p, ap)
        alpha = rr / pap
        xh = xh + alpha * p
        r = r - alpha * ap
        iterations = it + 1
        rr_new = np.vdot(r, r).real
        relres = float(np.sqrt(rr_new) / bnorm)
        history.relres.append(relres)
        if errors is not None:
            errors.append(_anorm_error(a, w_part + apply_p6(basis, xh), x_star))
        beta = rr_new / rr
        rr = rr_new
        p = r + beta * p
        if relres <= tol:
            converged = True

    x = w_part + apply_p6(basis, xh)
    final = float(np.linalg.norm(b - a.apply(x)) / bnorm)
    return CgReport(x, converged or final <= tol, iterations, final, history, a_norm_errors=errors)


def effective_condition_number(a: OperatorHandle, basis: AugBasis) -> float:
    """Largest over smallest strictly positive eigenvalue of ``P6^H A``.

    Dense diagnostic path; refuses n > 2000.
    """
    if a.dim > 2000:
        raise InvalidInputError("effective_condition_number is a dense diagnostic (n <= 2000)")
    ad = to_dense(a)
    if basis.k:
        m = ad - basis.aw @ basis.gram.solve(basis.w.conj().T @ ad)
    else:
        m = ad
    m = (m + m.conj().T) / 2.0
    eigs = np.linalg.eigvalsh(m)
    lam_max = float(eigs[-1])
    if lam_max <= 0.0:
        raise SingularOperatorError("projected operator has no positive eigenvalues")
    positive = eigs[eigs > 1e-10 * lam_max]
    if positive.size == 0:
        raise SingularOperatorError("all eigenvalues of the projected operator are negligible")
    return float(lam_max / positive[0])


def estimate_next_eigenvalue(a: OperatorHandle, basis: AugBasis, steps: Optional[int] = None, seed: int = 0) -> float:
    """Short Lanczos estimate of the smallest eigenvalue outside range(W)."""
    n = a.dim
    steps = min(2 * basis.k + 20, n - basis.k, 60) if steps is None else steps
    if steps < 1:
        raise InvalidInputError("no room outside the deflation basis")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)

    def deflect(u):
        if basis.k:
            return u - basis.w @ (basis.w.conj().T @ u)
        return u

    v = deflect(v)
    v /= np.linalg.norm(v)
    alphas, betas = [], []
    v_prev = np.zeros_like(v)
    beta = 0.0
    for _ in range(steps):
        u = deflect(a.apply(v))
        alpha = np.vdot(v, u).real
        u = u - alpha * v - beta * v_prev
        u = deflect(u)
        beta_new = np.linalg.norm(u)
        alphas.append(alpha)
        if beta_new <= 1e-14:
            break
        betas.append(beta_new)
        v_prev, v = v, u / beta_new
        beta = beta_new
    t = np.diag(alphas)
    if betas:
        off = np.array(betas[: len(alphas) - 1])
        t = t + np.diag(off, 1) + np.diag(off, -1)
    ritz = np.linalg.eigvalsh(t)
    return float(ritz[0])


def build_spectral_preconditioner(
    kind: str,
    basis: AugBasis,
    nu: Optional[float] = None,
    a: Optional[OperatorHandle] = None,
) -> PreconditionerHandle:
    """Spectral preconditioners from (approximate) eigenvectors in W.

    ``mdef`` moves the deflated eigenvalues to ``nu`` and leaves the rest of
    the spectrum unchanged; ``mcoarse`` is the additive coarse correction
    shifting them to ``nu + lambda_i``. When ``nu`` is omitted for ``mdef``
    it defaults to a short-Lanczos estimate of the first undeflated
    eigenvalue (pass the operator for that).
    """
    if kind not in ("mdef", "mcoarse"):
        raise InvalidInputError(f"unknown spectral preconditioner kind {kind!r}")
    if nu is None:
        if kind != "mdef":
            raise InvalidInputError("mcoarse needs an explicit nu")
        if a is None:
            raise InvalidInputError("estimating nu needs the operator")
        nu = estimate_next_eigenvalue(a, basis)
    if not nu > 0:
        raise InvalidInputError("nu must be positive")

    if kind == "mdef":

        def apply(v):
            v = as_vector(v)
            wv = basis.w.conj().T @ v
            return v + basis.w @ (nu * basis.gram.solve(wv) - wv)

    else:

        def apply(v):
            v = as_vector(v)
            return v + nu * (basis.w @ basis.gram.solve(basis.w.conj().T @ v))

    return PreconditionerHandle(apply, flexible=False)


def spectral_preconditioner_diagnostics(kind: str, basis: AugBasis, a: OperatorHandle, nu: float):
    """Dense verification of the preconditioned spectrum (n <= 2000).

    Returns the preconditioned eigenvalues, the condition number, and for
    ``mcoarse`` whether the admissibility window for ``nu`` holds.
    """
    if a.dim > 2000:
        raise InvalidInputError("diagnostics are dense only (n <= 2000)")
    handle = build_spectral_preconditioner(kind, basis, nu)
    ad = to_dense(a)
    ma = np.column_stack([handle.apply(ad[:, i]) for i in range(a.dim)])
    spectrum = np.sort(np.linalg.eigvals(ma).real)
    kappa = float(spectrum[-1] / spectrum[0]) if spectrum[0] > 0 else np.inf
    out = {"spectrum": spectrum, "kappa": kappa}
    if kind == "mcoarse":
        lam = np.linalg.eigvalsh((ad + ad.conj().T) / 2.0)
        k = basis.k
        lam_sorted = np.sort(lam)
        window_ok = (
            lam_sorted[k] <= lam_sorted[0] + nu
            and lam_sorted[k - 1] + nu <= lam_sorted[-1]
        ) if k else True
        out["nu_window_ok"] = bool(window_ok)
    return out
