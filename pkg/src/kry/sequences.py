"""Driver for sequences of linear systems with subspace recycling.

The first system is solved cold; every later one is warm-started with the
space harvested from the previous solve: harmonic Ritz directions for the
minimum-residual family, Lanczos Ritz vectors (through the projected initial
guess) for the HPD family. Recycling never relaxes the convergence target:
each report's final residual is the true one for its own system.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np

from .cg import AugBasis, CgReport, augmented_cg_solve, cg_solve, deflated_cg_solve
from .dense import thin_qr
from .errors import HarvestTooSmallError, InvalidInputError, KrylovError
from .gcro import gcro_dr_solve
from .gmres import SolveConfig, SolveReport, fgmres_solve
from .operators import OperatorHandle, PreconditionerHandle
from .recycling import HarmonicSpec, RecycleSpace, gmres_dr_solve, harvest_from_snapshot


@dataclass
class SystemSpec:
    operator: OperatorHandle
    rhs: np.ndarray
    method: Optional[str] = None


@dataclass
class SystemSequence:
    systems: List[SystemSpec]

    def __post_init__(self):
        if not self.systems:
            raise InvalidInputError("sequence needs at least one system")
        n = self.systems[0].operator.dim
        for s in self.systems:
            if s.operator.dim != n or np.asarray(s.rhs).shape[0] != n:
                raise InvalidInputError("all systems in a sequence must share the dimension")


@dataclass(frozen=True)
class RecycleStrategy:
    kind: str = "none"
    k: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "harmonic-dr", "hpd-eigs"):
            raise InvalidInputError(f"unknown recycle strategy {self.kind!r}")
        if self.k < 0:
            raise InvalidInputError("recycle dimension must be nonnegative")


_MINRES_METHODS = ("gmres", "fgmres", "gmres-dr", "gcro-dr")
_HPD_METHODS = ("cg", "aug-cg", "defl-cg")


def _check_compatible(method: str, strategy: RecycleStrategy):
    if strategy.kind == "none" or strategy.k == 0:
        return
    if strategy.kind == "harmonic-dr" and method not in ("gmres-dr", "gcro-dr"):
        raise InvalidInputError("harmonic-dr recycling needs gmres-dr or gcro-dr")
    if strategy.kind == "hpd-eigs" and method not in ("aug-cg", "defl-cg"):
        raise InvalidInputError("hpd-eigs recycling needs aug-cg or defl-cg")


def harvest_recycle_space(
    report: Union[SolveReport, CgReport],
    strategy: RecycleStrategy,
    a: Optional[OperatorHandle] = None,
    previous: Optional[AugBasis] = None,
):
    """Extract the warm-start space from a finished solve.

    Minimum-residual solves yield a :class:`RecycleSpace` from the retained
    final cycle; HPD solves yield an :class:`AugBasis` of Ritz vectors of the
    retained Lanczos tridiagonal, merged with the previous basis (smallest
    Rayleigh quotients win).
    """
    if strategy.kind == "none" or strategy.k == 0:
        return None
    if strategy.kind == "harmonic-dr":
        if not isinstance(report, SolveReport):
            raise HarvestTooSmallError("no retained cycle state to harvest")
        if report.recycle is not None:
            return report.recycle
        if report.snapshot is None:
            raise HarvestTooSmallError("no retained cycle state to harvest")
        if report.snapshot.state.j <= strategy.k:
            raise HarvestTooSmallError(
                f"final cycle dimension {report.snapshot.state.j} cannot yield k={strategy.k}"
            )
        return harvest_from_snapshot(report.snapshot, HarmonicSpec(k=strategy.k), operator=a)

    if a is None:
        raise InvalidInputError("hpd-eigs harvesting needs the operator")
    if not isinstance(report, CgReport) or report.lanczos is None:
        raise HarvestTooSmallError("no retained Lanczos data to harvest")
    lanczos = report.lanczos
    m = lanczos.vectors.shape[1]
    if m < strategy.k:
        raise HarvestTooSmallError(f"{m} Lanczos steps cannot yield k={strategy.k}")
    tri = lanczos.tridiagonal()
    ritz_values, ritz_vectors = np.linalg.eigh(tri)
    fresh = lanczos.vectors @ ritz_vectors[:, : strategy.k]

    candidates = fresh if previous is None else np.column_stack([previous.w, fresh])
    qr = thin_qr(candidates)
    basis = qr.Q[:, : qr.rank]
    rayleigh = np.array([np.vdot(basis[:, i], a.apply(basis[:, i])).real for i in range(basis.shape[1])])
    order = np.argsort(rayleigh)
    keep = basis[:, order[: strategy.k]]
    return AugBasis.build(a, keep)


def _cg_budget(config: SolveConfig) -> int:
    return config.restart * config.max_cycles


def _solve_one(
    method: str,
    a: OperatorHandle,
    b,
    config: SolveConfig,
    m: Optional[PreconditionerHandle],
    warm,
    keep_lanczos: int,
):
    if method == "cg":
        return cg_solve(a, b, tol=config.tol, maxiter=_cg_budget(config), m=m,
                        keep_lanczos=keep_lanczos)
    if method == "aug-cg":
        basis = warm if isinstance(warm, AugBasis) else AugBasis.build(a, np.zeros((a.dim, 0)))
        return augmented_cg_solve(a, b, basis, tol=config.tol, maxiter=_cg_budget(config),
                                  keep_lanczos=keep_lanczos)
    if method == "defl-cg":
        basis = warm if isinstance(warm, AugBasis) else AugBasis.build(a, np.zeros((a.dim, 0)))
        if basis.k == 0:
            return cg_solve(a, b, tol=config.tol, maxiter=_cg_budget(config), m=m,
                            keep_lanczos=keep_lanczos)
        return deflated_cg_solve(a, b, basis, tol=config.tol, maxiter=_cg_budget(config))
    if method in ("gmres", "fgmres"):
        return fgmres_solve(a, b, config, m=m)
    if method == "gmres-dr":
        recycle = warm if isinstance(warm, RecycleSpace) else None
        return gmres_dr_solve(a, b, config, m=m, recycle=recycle)
    if method == "gcro-dr":
        recycle = warm if isinstance(warm, RecycleSpace) else None
        return gcro_dr_solve(a, b, config, m=m, recycle=recycle)
    raise InvalidInputError(f"sequence driver does not handle method {method!r}")


def solve_sequence(
    seq: SystemSequence,
    strategy: RecycleStrategy,
    config: SolveConfig,
    method: str = "gmres-dr",
    m: Optional[PreconditionerHandle] = None,
) -> List[Union[SolveReport, CgReport]]:
    """Solve the systems in order, recycling between consecutive solves.

    Per-system failures are recorded as non-converged reports and the
    sequence continues. With strategy ``none`` every solve is independent.
    """
    _check_compatible(method, strategy)
    if strategy.kind == "harmonic-dr" and strategy.k > 0 and config.augment != strategy.k:
        config = SolveConfig(config.restart, config.tol, config.max_cycles, strategy.k)
    keep_lanczos = max(2 * strategy.k, 20) if strategy.kind == "hpd-eigs" else 0
    warm = None
    previous_basis: Optional[AugBasis] = None
    reports = []
    for system in seq.systems:
        sys_method = system.method or method
        _check_compatible(sys_method, strategy)
        try:
            report = _solve_one(sys_method, system.operator, system.rhs, config, m, warm, keep_lanczos)
        except KrylovError as exc:
            failed = (
                CgReport(np.zeros(system.operator.dim, np.complex128), False, 0, np.inf,
                         history=_failed_history(str(exc)))
                if sys_method in _HPD_METHODS
                else SolveReport(np.zeros(system.operator.dim, np.complex128), False, 0, np.inf,
                                 history=_failed_history(str(exc)))
            )
            reports.append(failed)
            continue
        reports.append(report)
        if strategy.kind != "none" and strategy.k > 0:
            try:
                if strategy.kind == "hpd-eigs":
                    if isinstance(report, CgReport) and report.lanczos is not None:
                        harvested = harvest_recycle_space(report, strategy, system.operator, previous_basis)
                        previous_basis = harvested
                        warm = harvested
                    # a solve without retained Lanczos data keeps the basis as-is
                else:
                    warm = harvest_recycle_space(report, strategy)
            except (HarvestTooSmallError, KrylovError):
                pass
    return reports


def _failed_history(message: str):
    from .gmres import ConvergenceHistory

    history = ConvergenceHistory()
    history.events.append((0, f"error: {message}"))
    return history
