"""Flexible GMRES with restarting over the generalized Arnoldi relation.

The cycle machinery is shared with the deflated-restart and GCRO modules:
``ArnoldiState`` may start from a recycled block of columns, and the
incremental Givens least-squares solver triangularizes dense leading blocks
with the same code path as plain Hessenberg columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg

from .dense import BREAKDOWN_RTOL, hessenberg_lsq, orthonormalize_against
from .errors import InvalidInputError
from .operators import OperatorHandle, PreconditionerHandle


@dataclass
class SolveConfig:
    """Restart length, relative residual target, cycle budget, recycle size."""

    restart: int
    tol: float = 1e-8
    max_cycles: int = 100
    augment: int = 0

    def __post_init__(self):
        if self.restart < 1:
            raise InvalidInputError("restart length must be >= 1")
        if not (0 <= self.augment < self.restart):
            raise InvalidInputError("augment k must satisfy 0 <= k < restart")
        if not self.tol > 0:
            raise InvalidInputError("tol must be positive")
        if self.max_cycles < 1:
            raise InvalidInputError("max_cycles must be >= 1")


@dataclass
class ConvergenceHistory:
    """Per-iteration relative residual norms with cycle marks and events."""

    relres: List[float] = field(default_factory=list)
    cycle_marks: List[int] = field(default_factory=list)
    events: List[Tuple[int, str]] = field(default_factory=list)


@dataclass
class ArnoldiState:
    """Generalized Arnoldi data ``A Z_j = V_nv Hbar`` plus the LSQ rhs.

    ``j`` counts direction columns, ``nv`` basis columns; they differ when a
    direction was kept although its image added no new basis vector
    (degenerate augmentation, happy breakdown). ``seeded`` counts leading
    recycled columns whose Hbar block is dense. Arrays are preallocated at
    capacity.
    """

    V: np.ndarray
    Z: np.ndarray
    H: np.ndarray
    c: np.ndarray
    j: int = 0
    nv: int = 1
    seeded: int = 0
    breakdown: bool = False

    @property
    def capacity(self) -> int:
        return self.Z.shape[1]

    def basis(self) -> np.ndarray:
        return self.V[:, : self.nv]

    def directions(self) -> np.ndarray:
        return self.Z[:, : self.j]

    def hbar(self) -> np.ndarray:
        return self.H[: self.nv, : self.j]

    def rhs(self) -> np.ndarray:
        return self.c[: self.nv]


def new_arnoldi_state(n, capacity) -> ArnoldiState:
    return ArnoldiState(
        V=np.zeros((n, capacity + 1), dtype=np.complex128),
        Z=np.zeros((n, capacity), dtype=np.complex128),
        H=np.zeros((capacity + 1, capacity), dtype=np.complex128),
        c=np.zeros(capacity + 1, dtype=np.complex128),
    )


def seeded_arnoldi_state(v_block, z_block, h_block, c0, capacity) -> ArnoldiState:
    """State whose leading columns come from a recycled subspace.

    ``v_block`` is n x (k+1) orthonormal, ``z_block`` n x k, ``h_block``
    (k+1) x k with ``A z_block = v_block h_block``, and ``c0`` the
    coordinates of the current residual in the ``v_block`` basis.
    """
    n, k1 = v_block.shape
    k = k1 - 1
    if capacity <= k:
        raise InvalidInputError("capacity must exceed the seeded block size")
    state = new_arnoldi_state(n, capacity)
    state.V[:, : k + 1] = v_block
    state.Z[:, :k] = z_block
    state.H[: k + 1, :k] = h_block
    state.c[: k + 1] = c0
    state.j = k
    state.nv = k + 1
    state.seeded = k
    return state


def _check_finite(v, what):
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{what} returned a non-finite vector")


def arnoldi_expand(
    state: ArnoldiState,
    a: OperatorHandle,
    m: Optional[PreconditionerHandle] = None,
) -> ArnoldiState:
    """One step of the Arnoldi procedure with (optional) variable preconditioning.

    Appends ``z_j = M_j^{-1} v_j`` and the orthogonalized image ``A z_j``.
    On happy breakdown the subdiagonal entry is set to zero, no new basis
    vector is appended and ``state.breakdown`` is raised.
    """
    if state.breakdown:
        raise InvalidInputError("cannot expand past a breakdown")
    j = state.j
    if j >= state.capacity:
        raise InvalidInputError("Arnoldi state is at capacity")
    v = state.V[:, state.nv - 1]
    z = m.apply(v) if m is not None else v.copy()
    _check_finite(z, "preconditioner")
    s = a.apply(z)
    _check_finite(s, "operator")
    coeffs, tail, unit = orthonormalize_against(s, state.V[:, : state.nv])
    state.Z[:, j] = z
    state.H[: state.nv, j] = coeffs
    if unit is None:
        state.breakdown = True
    else:
        state.H[state.nv, j] = tail
        state.V[:, state.nv] = unit
        state.nv += 1
    state.j = j + 1
    return state


def _givens(a, b):
    """Complex Givens pair (c real, s complex) zeroing b in [[c,s],[-conj(s),c]]."""
    if b == 0:
        return 1.0, 0.0 + 0.0j
    if a == 0:
        return 0.0, 1.0 + 0.0j
    absa = abs(a)
    d = np.sqrt(absa * absa + abs(b) ** 2)
    return absa / d, (a / absa) * np.conj(b) / d


class GivensLsq:
    """Incremental QR of a column-growing least-squares problem.

    Rotations accumulate in a dense unitary of subspace size so the running
    residual norm is free after every pushed column, for Hessenberg columns
    and for the dense leading block of a recycled cycle alike.
    """

    def __init__(self, c, rows):
        c = np.asarray(c, dtype=np.complex128)
        cap = c.shape[0]
        self.omega = np.eye(cap, dtype=np.complex128)
        self.t = c.copy()
        self.r = np.zeros((cap, cap - 1), dtype=np.complex128)
        self.rows = rows
        self.ncols = 0

    def grow_row(self):
        self.rows += 1

    def push_column(self, h):
        """Triangularize one new column of active height ``self.rows``."""
        j = self.ncols
        col = self.omega[: self.rows, : self.rows] @ np.asarray(h, dtype=np.complex128)
        for i in range(self.rows - 1, j, -1):
            c_, s_ = _givens(col[i - 1], col[i])
            col[i - 1] = c_ * col[i - 1] + s_ * col[i]
            col[i] = 0.0
            gi = np.array([[c_, s_], [-np.conj(s_), c_]], dtype=np.complex128)
            self.omega[i - 1 : i + 1, : self.rows] = gi @ self.omega[i - 1 : i + 1, : self.rows]
            self.t[i - 1 : i + 1] = gi @ self.t[i - 1 : i + 1]
        self.r[: j + 1, j] = col[: j + 1]
        self.ncols = j + 1

    @property
    def residual_norm(self) -> float:
        return float(np.linalg.norm(self.t[self.ncols : self.rows]))

    def solve(self) -> np.ndarray:
        j = self.ncols
        upper = self.r[:j, :j]
        if j == 0:
            return np.zeros(0, dtype=np.complex128)
        if np.any(np.abs(np.diag(upper)) == 0.0):
            y, _, _, _ = np.linalg.lstsq(upper, self.t[:j], rcond=None)
            return y
        return scipy.linalg.solve_triangular(upper, self.t[:j])


@dataclass
class CycleResult:
    x: np.ndarray
    state: ArnoldiState
    y: np.ndarray
    residual_norm: float
    step_residuals: List[float]
    breakdown: bool
    truncated: bool = False

    def residual_coords(self) -> np.ndarray:
        """Coordinates of ``b - A x`` in the ``V_{j+1}`` basis: ``c - Hbar y``."""
        return self.state.rhs() - self.state.hbar() @ self.y


def run_cycle(
    a: OperatorHandle,
    b,
    x_in,
    config: SolveConfig,
    m: Optional[PreconditionerHandle] = None,
    state: Optional[ArnoldiState] = None,
    max_steps: Optional[int] = None,
    abs_tol: float = 0.0,
) -> CycleResult:
    """One (possibly seeded) minimum-residual cycle.

    With ``state=None`` a fresh Arnoldi space is started from ``b - A x_in``.
    A seeded state must already carry the leading block and the rhs
    coordinates of the current residual. Returns the cycle minimizer
    ``x_in + Z y*`` and the estimated residual norm ``||c - Hbar y*||``.
    """
    b = np.asarray(b, dtype=np.complex128)
    x_in = np.asarray(x_in, dtype=np.complex128)
    if state is None:
        r0 = b - a.apply(x_in)
        beta = np.linalg.norm(r0)
        state = new_arnoldi_state(a.dim, config.restart)
        if beta <= BREAKDOWN_RTOL * max(np.linalg.norm(b), 1.0):
            return CycleResult(x_in.copy(), state, np.zeros(0, np.complex128), float(beta), [], False)
        state.V[:, 0] = r0 / beta
        state.c[0] = beta

    lsq = GivensLsq(state.c, rows=state.nv)
    for col in range(state.seeded):
        lsq.push_column(state.H[: state.nv, col])

    steps = max_steps if max_steps is not None else config.restart - state.j
    if state.seeded and abs_tol > 0.0 and lsq.residual_norm <= abs_tol:
        # the recycled block alone already meets the target: no new matvecs
        steps = 0
    step_residuals = []
    for _ in range(steps):
        arnoldi_expand(state, a, m)
        if state.nv > lsq.rows:
            lsq.grow_row()
        lsq.push_column(state.H[: lsq.rows, state.j - 1])
        step_residuals.append(lsq.residual_norm)
        if state.breakdown or lsq.residual_norm <= abs_tol:
            break

    if state.breakdown:
        # definitive least squares: the square singular case needs care
        result = hessenberg_lsq(state.hbar(), state.rhs())
        y, resnorm = result.solution, result.residual_norm
        if step_residuals:
            step_residuals[-1] = resnorm
    else:
        y = lsq.solve()
        resnorm = lsq.residual_norm
    x_out = x_in + state.directions() @ y
    return CycleResult(x_out, state, y, float(resnorm), step_residuals, state.breakdown)


def fgmres_cycle(
    a: OperatorHandle,
    b,
    x0,
    config: SolveConfig,
    m: Optional[PreconditionerHandle] = None,
    abs_tol: float = 0.0,
) -> CycleResult:
    """One plain FGMRES cycle from ``x0``; see :func:`run_cycle`."""
    return run_cycle(a, b, x0, config, m=m, abs_tol=abs_tol)


@dataclass
class CycleSnapshot:
    """Final-cycle data retained for recycling harvests."""

    state: ArnoldiState
    y: np.ndarray


@dataclass
class SolveReport:
    solution: np.ndarray
    converged: bool
    iterations: int
    final_relres: float
    history: ConvergenceHistory
    breakdown: bool = False
    snapshot: Optional[CycleSnapshot] = None
    #: freshest recycle space retained by deflated-restart solvers
    recycle: Optional[object] = None


def _true_relres(a, b, x, bnorm):
    return float(np.linalg.norm(b - a.apply(x)) / bnorm)


def fgmres_solve(
    a: OperatorHandle,
    b,
    config: SolveConfig,
    x0=None,
    m: Optional[PreconditionerHandle] = None,
) -> SolveReport:
    """Restarted flexible GMRES.

    Convergence is tested on the Arnoldi residual estimate each iteration;
    the returned ``final_relres`` is the recomputed true residual. Stagnation
    over a full cycle is recorded as an event and the loop continues to the
    cycle budget.
    """
    b = np.asarray(b, dtype=np.complex128)
    if b.shape[0] != a.dim:
        raise InvalidInputError("right-hand side dimension mismatch")
    x = np.zeros(a.dim, dtype=np.complex128) if x0 is None else np.asarray(x0, dtype=np.complex128).copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        history = ConvergenceHistory(relres=[0.0])
        return SolveReport(x * 0.0, True, 0, 0.0, history)

    history = ConvergenceHistory()
    history.relres.append(_true_relres(a, b, x, bnorm))
    abs_tol = config.tol * bnorm
    iterations = 0
    breakdown = False
    snapshot = None
    converged = history.relres[0] <= config.tol

    for _ in range(config.max_cycles):
        if converged:
            break
        prev = history.relres[-1]
        cycle = run_cycle(a, b, x, config, m=m, abs_tol=abs_tol)
        x = cycle.x
        for res in cycle.step_residuals:
            iterations += 1
            history.relres.append(res / bnorm)
        snapshot = CycleSnapshot(cycle.state, cycle.y)
        est = cycle.residual_norm / bnorm
        if est <= config.tol:
            # estimate says done; confirm on the true residual (flexible drift)
            if _true_relres(a, b, x, bnorm) <= config.tol:
                converged = True
            else:
                history.events.append((iterations, "estimate-drift"))
        if cycle.breakdown:
            history.events.append((iterations, "breakdown"))
            breakdown = not converged
            break
        if not converged:
            if prev > 0 and (prev - est) < 1e-14 * prev:
                history.events.append((iterations, "stagnation"))
            history.cycle_marks.append(iterations)

    final = _true_relres(a, b, x, bnorm)
    return SolveReport(x, converged or final <= config.tol, iterations, final, history, breakdown, snapshot)
