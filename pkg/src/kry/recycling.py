"""Subspace augmentation and deflated restarting for minimum-residual solvers.

Carries a compressed triplet ``(Z_k, V_{k+1}, Hbar_k)`` across restart cycles
(and, through the sequences driver, across linear systems). The harmonic
Ritz extraction targets a chosen part of the spectrum of the subspace
restriction of the operator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

from .dense import as_matrix, dense_eig, orthonormalize_against, thin_qr
from .errors import HarmonicBreakdownError, InvalidInputError, KrylovError
from .gmres import (
    ArnoldiState,
    ConvergenceHistory,
    CycleResult,
    CycleSnapshot,
    GivensLsq,
    SolveConfig,
    SolveReport,
    arnoldi_expand,
    new_arnoldi_state,
    run_cycle,
    seeded_arnoldi_state,
)
from .operators import OperatorHandle, PreconditionerHandle


@dataclass(frozen=True)
class HarmonicSpec:
    """How many harmonic Ritz pairs to keep and from which end of the spectrum."""

    k: int
    which: str = "smallest-modulus"
    target: Optional[complex] = None

    def __post_init__(self):
        if self.k < 1:
            raise InvalidInputError("harmonic spec needs k >= 1")
        if self.which not in ("smallest-modulus", "largest-modulus", "nearest-to-target"):
            raise InvalidInputError(f"unknown harmonic selection {self.which!r}")
        if self.which == "nearest-to-target" and self.target is None:
            raise InvalidInputError("nearest-to-target needs a target value")


@dataclass(frozen=True)
class RecycleSpace:
    """Compressed subspace satisfying ``A Z_k = V_{k+1} Hbar_k``."""

    Zk: np.ndarray
    Vk1: np.ndarray
    Hk: np.ndarray
    theta: np.ndarray
    events: Tuple[str, ...] = ()

    @property
    def k(self) -> int:
        return self.Zk.shape[1]


def harmonic_ritz(hbar, spec: HarmonicSpec):
    """Harmonic Ritz vectors of the subspace restriction from its Hessenberg data.

    Solves the small standard eigenproblem of the square block corrected by
    the rank-one term built from the subdiagonal entry, then keeps the ``k``
    pairs selected by ``spec``. On (numerically) real problems a conjugate
    pair split at the selection boundary is kept whole, so the returned
    count may be ``k + 1``.

    Returns ``(p_k, theta)`` with unit columns ``p_k`` of shape (l, k).
    """
    hbar = as_matrix(hbar)
    rows, ell = hbar.shape
    if rows != ell + 1 or ell < 1:
        raise InvalidInputError("harmonic_ritz expects an (l+1) x l matrix")
    if spec.k >= ell:
        raise InvalidInputError("cannot extract k >= l harmonic pairs")
    h_sq = hbar[:ell, :]
    h_sub = hbar[ell, ell - 1]

    qr = thin_qr(h_sq)
    if qr.rank < ell:
        raise HarmonicBreakdownError("square Hessenberg block is singular")
    r_inv = scipy.linalg.solve_triangular(qr.R, np.eye(ell, dtype=np.complex128))
    cond = np.linalg.norm(qr.R, 1) * np.linalg.norm(r_inv, 1)
    if cond > 1e14:
        raise HarmonicBreakdownError(f"square block condition estimate {cond:.2e}")

    e_last = np.zeros(ell, dtype=np.complex128)
    e_last[-1] = 1.0
    f = np.linalg.solve(h_sq.conj().T, e_last)
    corrected = h_sq + (h_sub**2) * np.outer(f, e_last)
    pairs = dense_eig(corrected)

    theta = pairs.values.copy()
    vectors = pairs.vectors.copy()
    # The explicit correction term has norm ~ ||H^{-1}||, which smears the
    # eigenvectors of well-separated pairs once tiny harmonic values are
    # present. Polish against the generalized form (moderate norms) by
    # inverse iteration wherever the pencil residual is not at noise level.
    a_p = hbar.conj().T @ hbar
    b_p = h_sq.conj().T
    scale = np.linalg.norm(a_p) + np.linalg.norm(b_p)
    for j in range(ell):
        y_j, th = vectors[:, j], theta[j]
        res = np.linalg.norm(a_p @ y_j - th * (b_p @ y_j))
        if res <= 1e-13 * scale:
            continue
        for _ in range(3):
            try:
                w = np.linalg.solve(a_p - th * b_p, b_p @ y_j)
            except np.linalg.LinAlgError:
                break
            w /= np.linalg.norm(w)
            denom = np.vdot(w, b_p @ w)
            if denom == 0:
                break
            y_j, th = w, np.vdot(w, a_p @ w) / denom
            res = np.linalg.norm(a_p @ y_j - th * (b_p @ y_j))
            if res <= 1e-13 * scale:
                break
        vectors[:, j], theta[j] = y_j, th
    if spec.which == "smallest-modulus":
        key = np.abs(theta)
    elif spec.which == "largest-modulus":
        key = -np.abs(theta)
    else:
        key = np.abs(theta - spec.target)
    order = np.lexsort((theta.imag, theta.real, key))

    keep = spec.k
    # keep conjugate pairs together on real problems
    hscale = np.linalg.norm(hbar)
    is_real = np.max(np.abs(hbar.imag)) <= 1e-13 * max(hscale, 1.0)
    if is_real and keep < ell - 1:
        last = theta[order[keep - 1]]
        nxt = theta[order[keep]]
        if abs(last.imag) > 1e-12 * max(abs(last), 1.0) and abs(nxt - np.conj(last)) <= 1e-8 * max(abs(last), 1.0):
            keep += 1

    sel = order[:keep]
    return vectors[:, sel], theta[sel]


def dr_compress(state: ArnoldiState, p_k, y, theta=None, operator=None) -> RecycleSpace:
    """Compress a finished cycle onto the harmonic directions plus the residual.

    Thin-QR of the (l+1) x (k+1) matrix ``[[P_k; 0], c - Hbar y]`` rotates the
    large bases: ``Z_k = Z_l Q_{l x k}``, ``V_{k+1} = V_{l+1} Q`` and
    ``Hbar_k = Q^H Hbar_l Q_{l x k}``. The generalized Arnoldi relation and
    the orthonormality of the new basis are verified here in the small
    dimension; degeneracies reduce ``k`` and are recorded as events.

    When the square Hessenberg block is nearly singular the harmonic vectors
    cannot carry the relation to the 1e-10 invariant; if ``operator`` is
    given the relation is then re-established exactly by applying it to the
    compressed directions (k extra operator actions, event
    ``recycle-rebuilt``), otherwise the compression reports a harmonic
    breakdown.
    """
    p_k = as_matrix(p_k)
    ell = state.j
    rows = ell + 1
    if state.nv != rows:
        raise InvalidInputError("compression needs a full generalized Arnoldi relation")
    if p_k.shape[0] != ell:
        raise InvalidInputError("harmonic vectors do not match the cycle dimension")
    y = np.asarray(y, dtype=np.complex128)
    theta = np.zeros(p_k.shape[1], np.complex128) if theta is None else np.asarray(theta, np.complex128)
    hbar = state.hbar()
    resid = state.rhs() - hbar @ y
    events = []

    # drop numerically dependent harmonic columns first (pivoted QR)
    padded = np.zeros((rows, p_k.shape[1]), dtype=np.complex128)
    padded[:ell, :] = p_k
    if p_k.shape[1]:
        _, rpiv, piv = scipy.linalg.qr(padded, mode="economic", pivoting=True)
        diag = np.abs(np.diag(rpiv))
        tol = max(rows, p_k.shape[1]) * np.finfo(float).eps * (diag.max() if diag.size else 0.0)
        rank = int(np.count_nonzero(diag > tol))
        if rank < p_k.shape[1]:
            events.append("recycle-reduced")
            keep = np.sort(piv[:rank])
            padded = padded[:, keep]
            theta = theta[keep]

    k = padded.shape[1]
    g = np.hstack([padded, resid[:, None]])
    qr = thin_qr(g)
    if qr.rank == k + 1:
        q = qr.Q
    else:
        # residual column is (numerically) inside the harmonic span: keep the
        # k-column compression and complete the basis with the last Arnoldi
        # vector, which is orthogonal to every bottom-row-free column.
        events.append("recycle-degenerate")
        q_lead = thin_qr(padded).Q if k else np.zeros((rows, 0), dtype=np.complex128)
        e_last = np.zeros((rows, 1), dtype=np.complex128)
        e_last[-1, 0] = 1.0
        q = np.hstack([q_lead, e_last])

    q_trunc = q[:ell, :k]
    new_z = state.directions() @ q_trunc
    new_v = state.basis() @ q
    new_h = q.conj().T @ hbar @ q_trunc

    # small-dimension postcondition: Hbar Q_trunc must lie in range(Q)
    defect = hbar @ q_trunc - q @ new_h
    hscale = max(np.linalg.norm(hbar), 1e-300)
    if np.linalg.norm(defect) > 1e-10 * hscale:
        if operator is None:
            raise HarmonicBreakdownError(
                f"compression defect {np.linalg.norm(defect) / hscale:.2e} breaks the Arnoldi relation"
            )
        events.append("recycle-rebuilt")
        r_vec = state.basis() @ resid
        images = np.column_stack([operator.apply(new_z[:, i]) for i in range(k)])
        qn, rn = np.linalg.qr(np.column_stack([images, r_vec]))
        new_v, new_h = qn, rn[:, :k]
    return RecycleSpace(new_z, new_v, new_h, theta, tuple(events))


def recycle_defects(space: RecycleSpace, a: OperatorHandle):
    """Residuals of the two recycle-space invariants, for verification."""
    az = np.column_stack([a.apply(space.Zk[:, i]) for i in range(space.k)]) if space.k else np.zeros_like(space.Zk)
    rel = np.linalg.norm(az - space.Vk1 @ space.Hk)
    orth = np.linalg.norm(space.Vk1.conj().T @ space.Vk1 - np.eye(space.Vk1.shape[1]))
    return rel, orth


def _expand_with(state: ArnoldiState, a: OperatorHandle, m, source):
    """Arnoldi step whose direction comes from ``source`` instead of ``v_j``.

    A direction whose image is numerically dependent on the current basis is
    still kept in the search space (zero-tail column, the basis does not
    grow); that case returns False.
    """
    j = state.j
    z = m.apply(source) if m is not None else np.asarray(source, dtype=np.complex128)
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("preconditioner returned a non-finite vector")
    s = a.apply(z)
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("operator returned a non-finite vector")
    coeffs, tail, unit = orthonormalize_against(s, state.V[:, : state.nv])
    state.Z[:, j] = z
    state.H[: state.nv, j] = coeffs
    state.j = j + 1
    if unit is None:
        return False
    state.H[state.nv, j] = tail
    state.V[:, state.nv] = unit
    state.nv += 1
    return True


def _augmented_cycle(
    a: OperatorHandle,
    b,
    x_in,
    w,
    m_steps: int,
    m: Optional[PreconditionerHandle] = None,
    abs_tol: float = 0.0,
    precondition_augmentation: bool = True,
) -> CycleResult:
    """One cycle over ``K_m(.., r0) + span(W)`` with W fed through the Arnoldi loop."""
    b = np.asarray(b, dtype=np.complex128)
    x_in = np.asarray(x_in, dtype=np.complex128)
    w = as_matrix(w)
    k = w.shape[1]
    r0 = b - a.apply(x_in)
    beta = np.linalg.norm(r0)
    state = new_arnoldi_state(a.dim, m_steps + k)
    if beta == 0.0:
        return CycleResult(x_in.copy(), state, np.zeros(0, np.complex128), 0.0, [], False)
    state.V[:, 0] = r0 / beta
    state.c[0] = beta

    lsq = GivensLsq(state.c, rows=1)
    step_residuals = []
    truncated = False
    for _ in range(m_steps):
        arnoldi_expand(state, a, m)
        if state.nv > lsq.rows:
            lsq.grow_row()
        lsq.push_column(state.H[: lsq.rows, state.j - 1])
        step_residuals.append(lsq.residual_norm)
        if state.breakdown or lsq.residual_norm <= abs_tol:
            break
    if not state.breakdown and lsq.residual_norm > abs_tol:
        precond = m if precondition_augmentation else None
        for i in range(k):
            grew = _expand_with(state, a, precond, w[:, i])
            truncated = truncated or not grew
            if state.nv > lsq.rows:
                lsq.grow_row()
            lsq.push_column(state.H[: lsq.rows, state.j - 1])
            step_residuals.append(lsq.residual_norm)
            if lsq.residual_norm <= abs_tol:
                break

    y = lsq.solve()
    resnorm = lsq.residual_norm
    x_out = x_in + state.directions() @ y
    return CycleResult(x_out, state, y, float(resnorm), step_residuals, state.breakdown, truncated)


def augment_with_subspace(
    a: OperatorHandle,
    w,
    b,
    m_steps: int,
    x0=None,
    m: Optional[PreconditionerHandle] = None,
) -> CycleResult:
    """Minimum-residual solve over ``x0 + range(Z_{m+k})`` with an arbitrary
    augmentation basis ``w`` appended to the Krylov directions.

    Augmentation vectors pass through the (possibly variable) preconditioner
    exactly like Krylov vectors. Images that are numerically dependent on
    the current basis truncate the space (recorded on the result).
    """
    x0 = np.zeros(a.dim, dtype=np.complex128) if x0 is None else x0
    return _augmented_cycle(a, b, x0, w, m_steps, m=m, precondition_augmentation=True)


def gmres_dr_solve(
    a: OperatorHandle,
    b,
    config: SolveConfig,
    spec: Optional[HarmonicSpec] = None,
    x0=None,
    m: Optional[PreconditionerHandle] = None,
    recycle: Optional[RecycleSpace] = None,
) -> SolveReport:
    """GMRES with deflated restarting (flexible preconditioning allowed).

    The first cycle is plain FGMRES (or an augmented cycle when a recycled
    space warm-starts the solve). Every later cycle keeps ``k`` harmonic
    Ritz directions of the previous cycle, so the augmentation space adapts
    at each restart. A harmonic breakdown degrades one restart to plain
    GMRES and is recorded as an event.
    """
    k = config.augment
    if spec is None and k > 0:
        spec = HarmonicSpec(k=k)
    b = np.asarray(b, dtype=np.complex128)
    x = np.zeros(a.dim, dtype=np.complex128) if x0 is None else np.asarray(x0, dtype=np.complex128).copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return SolveReport(x * 0.0, True, 0, 0.0, ConvergenceHistory(relres=[0.0]))

    history = ConvergenceHistory()
    history.relres.append(float(np.linalg.norm(b - a.apply(x)) / bnorm))
    abs_tol = config.tol * bnorm
    iterations = 0
    converged = history.relres[0] <= config.tol
    breakdown = False
    snapshot = None
    space: Optional[RecycleSpace] = None
    warm = recycle
    r_vec = None

    for _ in range(config.max_cycles):
        if converged:
            break
        prev = history.relres[-1]
        if space is not None and space.k > 0:
            c0 = space.Vk1.conj().T @ r_vec
            state = seeded_arnoldi_state(space.Vk1, space.Zk, space.Hk, c0, config.restart)
            cyc = run_cycle(a, b, x, config, m=m, state=state, abs_tol=abs_tol)
        elif warm is not None and warm.k > 0:
            msteps = max(config.restart - warm.k, 1)
            cyc = _augmented_cycle(
                a, b, x, warm.Zk, msteps, m=m, abs_tol=abs_tol,
                precondition_augmentation=False,
            )
            warm = None
        else:
            cyc = run_cycle(a, b, x, config, m=m, abs_tol=abs_tol)

        x = cyc.x
        for res in cyc.step_residuals:
            iterations += 1
            history.relres.append(res / bnorm)
        snapshot = CycleSnapshot(cyc.state, cyc.y)
        est = cyc.residual_norm / bnorm
        drifted = False
        if est <= config.tol:
            if float(np.linalg.norm(b - a.apply(x)) / bnorm) <= config.tol:
                converged = True
            else:
                # recycled coordinates no longer track the true residual;
                # re-anchor with a plain restart from b - A x
                history.events.append((iterations, "estimate-drift"))
                drifted = True
        if cyc.breakdown:
            history.events.append((iterations, "breakdown"))
            breakdown = not converged
            break
        if converged:
            break
        if prev > 0 and (prev - est) < 1e-14 * prev:
            history.events.append((iterations, "stagnation"))
        history.cycle_marks.append(iterations)

        if drifted or cyc.state.nv != cyc.state.j + 1:
            space = None
        elif k > 0:
            try:
                p_k, theta = harmonic_ritz(cyc.state.hbar(), spec)
                space = dr_compress(cyc.state, p_k, cyc.y, theta, operator=a)
                for ev in space.events:
                    history.events.append((iterations, ev))
                history.events.append((iterations, "recycle-refresh"))
                r_vec = cyc.state.basis() @ cyc.residual_coords()
            except HarmonicBreakdownError:
                history.events.append((iterations, "harmonic-breakdown"))
                space = None

    final = float(np.linalg.norm(b - a.apply(x)) / bnorm)
    retained = space
    if k > 0 and snapshot is not None and snapshot.state.j > k:
        try:
            retained = harvest_from_snapshot(snapshot, spec, operator=a)
        except (HarmonicBreakdownError, KrylovError):
            pass
    return SolveReport(
        x, converged or final <= config.tol, iterations, final, history, breakdown, snapshot,
        recycle=retained,
    )


def harvest_from_snapshot(snapshot: CycleSnapshot, spec: HarmonicSpec, operator=None) -> RecycleSpace:
    """Harmonic-Ritz harvest of a retained final cycle, for recycling."""
    state = snapshot.state
    if state.j <= spec.k:
        raise KrylovError(f"cycle dimension {state.j} too small to harvest k={spec.k}")
    p_k, theta = harmonic_ritz(state.hbar(), spec)
    return dr_compress(state, p_k, snapshot.y, theta, operator=operator)


# ---------------------------------------------------------------------------
# Binary container for cross-run recycling
# ---------------------------------------------------------------------------

_MAGIC = b"KRYRCY1\x00"


def save_recycle_space(path, space: RecycleSpace):
    """Write dimensions plus raw little-endian complex128 arrays."""
    n = space.Zk.shape[0]
    k = space.k
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<qq", n, k))
        for arr in (space.Zk, space.Vk1, space.Hk, space.theta):
            fh.write(np.ascontiguousarray(arr, dtype="<c16").tobytes())


def load_recycle_space(path) -> RecycleSpace:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise InvalidInputError("not a recycle-space container")
    n, k = struct.unpack_from("<qq", blob, len(_MAGIC))
    sizes = [(n, k), (n, k + 1), (k + 1, k), (k,)]
    offset = len(_MAGIC) + 16
    arrays = []
    for shape in sizes:
        count = int(np.prod(shape))
        end = offset + 16 * count
        if end > len(blob):
            raise InvalidInputError("truncated recycle-space container")
        arrays.append(np.frombuffer(blob[offset:end], dtype="<c16").astype(np.complex128).reshape(shape))
        offset = end
    if offset != len(blob):
        raise InvalidInputError("trailing bytes in recycle-space container")
    zk, vk1, hk, theta = arrays
    return RecycleSpace(zk, vk1, hk, theta)
