"""Inner-outer minimum-residual solver with an orthogonalized outer space.

The outer pair ``(Z_k, V_k)`` satisfies ``A Z_k = V_k`` with orthonormal
``V_k``; the inner GMRES runs on the operator projected onto the orthogonal
complement of ``V_k``, so the residual is minimized over the outer and inner
spaces together and decreases monotonically over all inner iterations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .dense import orthonormalize_against, thin_qr
from .errors import HarmonicBreakdownError, InvalidInputError, KrylovError
from .gmres import (
    ConvergenceHistory,
    CycleResult,
    CycleSnapshot,
    SolveConfig,
    SolveReport,
    new_arnoldi_state,
    run_cycle,
)
from .operators import OperatorHandle, PreconditionerHandle
from .recycling import HarmonicSpec, RecycleSpace, dr_compress, harmonic_ritz


@dataclass(frozen=True)
class OuterSpace:
    """Correction and approximation bases with ``A Z_k = V_k``, ``V_k^H V_k = I``."""

    Zk: np.ndarray
    Vk: np.ndarray

    @property
    def k(self) -> int:
        return self.Zk.shape[1]


def empty_outer_space(n: int) -> OuterSpace:
    return OuterSpace(np.zeros((n, 0), np.complex128), np.zeros((n, 0), np.complex128))


def gcr_outer_append(space: OuterSpace, z, a: OperatorHandle) -> OuterSpace:
    """Append a correction direction, keeping both invariants exactly.

    The image ``A z`` is orthonormalized against ``V_k``; the same
    combination rescales ``z`` so the pairing survives. Raises when the
    image is numerically inside the current approximation space.
    """
    z = np.asarray(z, dtype=np.complex128)
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("outer append needs a finite direction")
    v = a.apply(z)
    coeffs, tail, unit = orthonormalize_against(v, space.Vk)
    if unit is None:
        raise KrylovError("image of the new direction lies in the approximation space")
    z_new = (z - space.Zk @ coeffs) / tail
    return OuterSpace(
        np.column_stack([space.Zk, z_new]),
        np.column_stack([space.Vk, unit]),
    )


class _RecordingProjector:
    """Wraps x -> (I - V V^H) A x and records the V^H A x coupling columns."""

    def __init__(self, a: OperatorHandle, vk: np.ndarray, m: Optional[PreconditionerHandle]):
        self.a = a
        self.vk = vk
        self.m = m
        self.columns: List[np.ndarray] = []

    def handle(self) -> OperatorHandle:
        def apply(x):
            s = self.a.apply(x)
            c = self.vk.conj().T @ s
            self.columns.append(c)
            return s - self.vk @ c

        return OperatorHandle(self.a.dim, apply)

    def coupling(self, ncols: int) -> np.ndarray:
        cols = self.columns[-ncols:] if ncols else []
        if not cols:
            return np.zeros((self.vk.shape[1], 0), np.complex128)
        return np.column_stack(cols)


@dataclass
class InnerCycleResult:
    z: np.ndarray
    residual: np.ndarray
    cycle: CycleResult
    coupling: np.ndarray


def gcro_inner_cycle(
    a: OperatorHandle,
    space: OuterSpace,
    r_k,
    m_steps: int,
    m: Optional[PreconditionerHandle] = None,
    abs_tol: float = 0.0,
) -> InnerCycleResult:
    """GMRES steps on the projected operator, merged with the outer space.

    Requires ``r_k`` orthogonal to the approximation basis. The returned
    correction already contains the outer update, so the new residual is the
    minimum over the combined outer plus inner space.
    """
    r_k = np.asarray(r_k, dtype=np.complex128)
    rnorm = np.linalg.norm(r_k)
    if space.k and rnorm > 0:
        leak = np.linalg.norm(space.Vk.conj().T @ r_k)
        if leak > 1e-10 * rnorm:
            raise InvalidInputError(f"inner residual leaks into the outer space ({leak / rnorm:.2e})")
    recorder = _RecordingProjector(a, space.Vk, m)
    config = SolveConfig(restart=m_steps, tol=1e-16, max_cycles=1)
    cyc = run_cycle(recorder.handle(), r_k, np.zeros(a.dim, np.complex128), config, m=m, abs_tol=abs_tol)
    b_block = recorder.coupling(cyc.state.j)
    y = cyc.y
    z_inner = cyc.x
    if space.k:
        z_total = z_inner - space.Zk @ (b_block @ y)
    else:
        z_total = z_inner
    r_new = cyc.state.basis() @ cyc.residual_coords()
    return InnerCycleResult(z_total, r_new, cyc, b_block)


def _outer_from_recycle(space: RecycleSpace, a: OperatorHandle, readapt: bool) -> OuterSpace:
    """Outer pair from a compressed recycle triplet.

    ``readapt`` recomputes the images under the (possibly new) operator; the
    span of the directions is kept either way.
    """
    if space.k == 0:
        return empty_outer_space(space.Zk.shape[0])
    if readapt:
        images = np.column_stack([a.apply(space.Zk[:, i]) for i in range(space.k)])
        qr = thin_qr(images)
        if qr.rank < space.k:
            raise KrylovError("recycled directions became dependent under the new operator")
        return OuterSpace(space.Zk @ np.linalg.inv(qr.R), qr.Q)
    qr = thin_qr(space.Hk)
    if qr.rank < space.k:
        raise KrylovError("compressed block is rank deficient")
    return OuterSpace(space.Zk @ np.linalg.inv(qr.R), space.Vk1 @ qr.Q)


def outer_from_recycle(space: RecycleSpace, a: OperatorHandle, readapt: bool = False) -> OuterSpace:
    return _outer_from_recycle(space, a, readapt)


def outer_to_recycle(outer: OuterSpace) -> RecycleSpace:
    """Pad the outer pair into the compressed-triplet layout.

    The extra basis column completes ``V_{k+1}``; warm starts only consume
    the direction block.
    """
    n, k = outer.Zk.shape
    rng_free = np.zeros(n, np.complex128)
    for i in range(min(n, k + 1)):
        cand = np.zeros(n, np.complex128)
        cand[i] = 1.0
        cand -= outer.Vk @ (outer.Vk.conj().T @ cand)
        nrm = np.linalg.norm(cand)
        if nrm > 1e-8:
            rng_free = cand / nrm
            break
    vk1 = np.column_stack([outer.Vk, rng_free])
    hk = np.zeros((k + 1, k), np.complex128)
    hk[:k, :k] = np.eye(k)
    return RecycleSpace(outer.Zk, vk1, hk, np.zeros(k, np.complex128))


def _combined_snapshot(outer: OuterSpace, inner: InnerCycleResult) -> CycleSnapshot:
    """Generalized Arnoldi state over [outer, inner] for harmonic harvesting."""
    cyc = inner.cycle
    st = cyc.state
    k = outer.k
    j = st.j
    n = st.V.shape[0]
    combined = new_arnoldi_state(n, k + j)
    combined.V[:, :k] = outer.Vk
    combined.V[:, k : k + j + 1] = st.basis()
    combined.Z[:, :k] = outer.Zk
    combined.Z[:, k : k + j] = st.directions()
    combined.H[:k, :k] = np.eye(k)
    combined.H[:k, k:] = inner.coupling
    combined.H[k : k + j + 1, k : k + j] = st.hbar()
    combined.c[:k] = 0.0
    combined.c[k : k + j + 1] = st.rhs()
    combined.j = k + j
    y_comb = np.concatenate([-(inner.coupling @ cyc.y), cyc.y])
    return CycleSnapshot(combined, y_comb)


def gcro_solve(
    a: OperatorHandle,
    b,
    config: SolveConfig,
    x0=None,
    m: Optional[PreconditionerHandle] = None,
    max_outer: Optional[int] = None,
) -> SolveReport:
    """Plain GCRO: each outer iteration appends its inner correction.

    The outer space grows by one direction per cycle up to ``max_outer``
    (default ``config.augment`` when positive, else the restart length),
    then freezes; optimal truncation is out of scope.
    """
    cap = max_outer if max_outer is not None else (config.augment or config.restart)
    b = np.asarray(b, dtype=np.complex128)
    x = np.zeros(a.dim, dtype=np.complex128) if x0 is None else np.asarray(x0, dtype=np.complex128).copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return SolveReport(x * 0.0, True, 0, 0.0, ConvergenceHistory(relres=[0.0]))

    history = ConvergenceHistory()
    r = b - a.apply(x)
    history.relres.append(float(np.linalg.norm(r) / bnorm))
    abs_tol = config.tol * bnorm
    iterations = 0
    converged = history.relres[0] <= config.tol
    breakdown = False
    snapshot = None
    outer = empty_outer_space(a.dim)

    for _ in range(config.max_cycles):
        if converged:
            break
        if outer.k:
            coef = outer.Vk.conj().T @ r
            x = x + outer.Zk @ coef
            r = r - outer.Vk @ coef
        inner = gcro_inner_cycle(a, outer, r, config.restart, m=m, abs_tol=abs_tol)
        x = x + inner.z
        r = inner.residual
        for res in inner.cycle.step_residuals:
            iterations += 1
            history.relres.append(res / bnorm)
        snapshot = _combined_snapshot(outer, inner)
        est = float(np.linalg.norm(r) / bnorm)
        if est <= config.tol and float(np.linalg.norm(b - a.apply(x)) / bnorm) <= config.tol:
            converged = True
        if inner.cycle.breakdown:
            history.events.append((iterations, "breakdown"))
            breakdown = not converged
            break
        if converged:
            break
        history.cycle_marks.append(iterations)
        if outer.k < cap and np.linalg.norm(inner.z) > 0:
            try:
                outer = gcr_outer_append(outer, inner.z, a)
            except KrylovError:
                history.events.append((iterations, "outer-append-rejected"))

    final = float(np.linalg.norm(b - a.apply(x)) / bnorm)
    return SolveReport(x, converged or final <= config.tol, iterations, final, history, breakdown, snapshot)


def gcro_dr_solve(
    a: OperatorHandle,
    b,
    config: SolveConfig,
    spec: Optional[HarmonicSpec] = None,
    x0=None,
    m: Optional[PreconditionerHandle] = None,
    recycle: Optional[RecycleSpace] = None,
) -> SolveReport:
    """GCRO with deflated restarting.

    Each cycle projects the residual onto the complement of the outer
    approximation space (no operator actions), runs the inner deflated GMRES,
    then refreshes the outer space from the harmonic Ritz directions of the
    combined relation. The global residual norm never increases across inner
    iterations. A harmonic breakdown keeps the previous outer space for one
    cycle.
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
    r = b - a.apply(x)
    history.relres.append(float(np.linalg.norm(r) / bnorm))
    abs_tol = config.tol * bnorm
    iterations = 0
    converged = history.relres[0] <= config.tol
    breakdown = False
    snapshot = None

    outer = empty_outer_space(a.dim)
    if recycle is not None and recycle.k > 0:
        outer = outer_from_recycle(recycle, a, readapt=True)
        history.events.append((0, "recycle-adapted"))

    for _ in range(config.max_cycles):
        if converged:
            break
        prev = history.relres[-1]
        if outer.k:
            coef = outer.Vk.conj().T @ r
            x = x + outer.Zk @ coef
            r = r - outer.Vk @ coef
            est0 = float(np.linalg.norm(r) / bnorm)
            if est0 <= config.tol and float(np.linalg.norm(b - a.apply(x)) / bnorm) <= config.tol:
                converged = True
                break
        m_steps = max(config.restart - outer.k, 1)
        inner = gcro_inner_cycle(a, outer, r, m_steps, m=m, abs_tol=abs_tol)
        x = x + inner.z
        r = inner.residual
        for res in inner.cycle.step_residuals:
            iterations += 1
            history.relres.append(res / bnorm)
        snapshot = _combined_snapshot(outer, inner)
        est = float(np.linalg.norm(r) / bnorm)
        if est <= config.tol:
            if float(np.linalg.norm(b - a.apply(x)) / bnorm) <= config.tol:
                converged = True
            else:
                history.events.append((iterations, "estimate-drift"))
                r = b - a.apply(x)
        if inner.cycle.breakdown:
            history.events.append((iterations, "breakdown"))
            breakdown = not converged
            break
        if converged:
            break
        if prev > 0 and (prev - est) < 1e-14 * prev:
            history.events.append((iterations, "stagnation"))
        history.cycle_marks.append(iterations)

        if k > 0:
            try:
                p_k, theta = harmonic_ritz(snapshot.state.hbar(), spec)
                space = dr_compress(snapshot.state, p_k, snapshot.y, theta, operator=a)
                outer = outer_from_recycle(space, a, readapt=False)
                for ev in space.events:
                    history.events.append((iterations, ev))
                history.events.append((iterations, "recycle-refresh"))
            except (HarmonicBreakdownError, KrylovError):
                history.events.append((iterations, "harmonic-breakdown"))

    final = float(np.linalg.norm(b - a.apply(x)) / bnorm)
    monotone = all(
        history.relres[i + 1] <= history.relres[i] * (1 + 1e-12) for i in range(len(history.relres) - 1)
    )
    if not monotone:
        history.events.append((iterations, "monotonicity-violation"))
    retained = None
    if k > 0 and snapshot is not None and snapshot.state.j > k:
        try:
            p_k, theta = harmonic_ritz(snapshot.state.hbar(), spec)
            retained = dr_compress(snapshot.state, p_k, snapshot.y, theta, operator=a)
        except (HarmonicBreakdownError, KrylovError):
            retained = None
    if retained is None and outer.k > 0:
        retained = outer_to_recycle(outer)
    return SolveReport(
        x, converged or final <= config.tol, iterations, final, history, breakdown, snapshot,
        recycle=retained,
    )
