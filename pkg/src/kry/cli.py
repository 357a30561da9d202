"""Batch command-line front end.

Two subcommands: ``solve`` runs a single system or a sequence manifest and
writes a convergence-history CSV plus a report JSON; ``spectrum`` emits
dense spectral diagnostics. Exit codes: 0 converged, 1 input error,
2 non-convergence, 64 unknown method.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from typing import Optional

import numpy as np

from .cg import (
    AugBasis,
    augmented_cg_solve,
    cg_solve,
    deflated_cg_solve,
    effective_condition_number,
)
from .deflation import deflated_gmres_oblique, deflated_gmres_ortho
from .errors import InvalidInputError, KrylovError, ParseError
from .gcro import gcro_dr_solve, gcro_solve
from .gmres import SolveConfig, fgmres_solve
from .operators import (
    OperatorHandle,
    PreconditionerHandle,
    operator_from_csr,
    read_dense_array,
    read_matrix_market,
    to_dense,
)
from .recycling import gmres_dr_solve
from .sequences import RecycleStrategy, SystemSequence, SystemSpec, solve_sequence

log = logging.getLogger("kry")

METHODS = (
    "cg",
    "aug-cg",
    "defl-cg",
    "gmres",
    "fgmres",
    "gmres-dr",
    "defl-gmres",
    "defl-gmres-oblique",
    "gcro",
    "gcro-dr",
)

_HPD_METHODS = ("cg", "aug-cg", "defl-cg")


@dataclasses.dataclass
class RunManifest:
    method: str
    matrix: Optional[str] = None
    rhs: str = "ones"
    precond: str = "none"
    deflation_space: str = "none"
    restart: int = 30
    recycle_dim: int = 0
    tol: float = 1e-8
    maxiter: int = 3000
    history: Optional[str] = None
    report: Optional[str] = None
    seed: int = 42
    sequence_manifest: Optional[str] = None

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.restart < 1 or self.maxiter < 1 or self.tol <= 0 or self.recycle_dim < 0:
            raise InvalidInputError("numeric options must be positive")


def _setup_logging():
    level = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("KRY_LOG", "info"), logging.INFO
    )
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")


def _load_operator(path: str, hermitian_hint: bool) -> OperatorHandle:
    csr = read_matrix_market(path)
    dense = csr.to_dense() if csr.dim <= 2000 else None
    hermitian = hermitian_hint
    if dense is not None:
        hermitian = bool(
            np.linalg.norm(dense - dense.conj().T) <= 1e-12 * max(np.linalg.norm(dense), 1.0)
        )
    handle = operator_from_csr(csr, hermitian=hermitian)
    return OperatorHandle(handle.dim, handle.apply, handle.hermitian, csr=csr, dense=dense)


def _load_rhs(spec: str, n: int) -> np.ndarray:
    if spec == "ones":
        return np.ones(n, dtype=np.complex128)
    arr = read_dense_array(spec)
    vec = arr[:, 0] if arr.ndim == 2 else arr
    if vec.shape[0] != n:
        raise InvalidInputError(f"right-hand side has length {vec.shape[0]}, expected {n}")
    return vec


def _auto_eig_spaces(a: OperatorHandle, k: int):
    if a.dim > 2000:
        raise InvalidInputError("auto-eig deflation needs the dense path (n <= 2000)")
    ad = to_dense(a)
    if a.hermitian:
        _, vecs = np.linalg.eigh((ad + ad.conj().T) / 2.0)
        return vecs[:, :k], vecs[:, :k]
    values, vecs = np.linalg.eig(ad)
    order = np.lexsort((values.imag, values.real, np.abs(values)))
    sel = order[:k]
    left = np.linalg.inv(vecs).conj().T
    return vecs[:, sel], left[:, sel]


def _load_deflation(spec: str, a: OperatorHandle):
    """Returns (W, Wt) or (None, None) for spec 'none'."""
    if spec == "none":
        return None, None
    if spec.startswith("auto-eig:"):
        k = int(spec.split(":", 1)[1])
        if k < 1:
            raise InvalidInputError("auto-eig needs k >= 1")
        return _auto_eig_spaces(a, k)
    if "," in spec:
        wpath, wtpath = spec.split(",", 1)
        return read_dense_array(wpath), read_dense_array(wtpath)
    w = read_dense_array(spec)
    return w, w


def _make_preconditioner(spec: str, a: OperatorHandle) -> Optional[PreconditionerHandle]:
    if spec == "none":
        return None
    if spec == "jacobi":
        if a.dense is not None:
            diag = np.diag(a.dense).copy()
        elif a.csr is not None:
            diag = np.zeros(a.dim, dtype=np.complex128)
            for i, j, v in zip(a.csr.row_ids, a.csr.col_indices, a.csr.values):
                if i == j:
                    diag[i] = v
        else:
            raise InvalidInputError("jacobi preconditioner needs an explicit matrix")
        if np.any(diag == 0.0):
            raise InvalidInputError("jacobi preconditioner hit a zero diagonal entry")
        return PreconditionerHandle(lambda v: v / diag)
    raise InvalidInputError(f"unknown preconditioner {spec!r}")


def _dispatch(manifest: RunManifest, a: OperatorHandle, b: np.ndarray):
    method = manifest.method
    cycles = max(manifest.maxiter // manifest.restart, 1)
    config = SolveConfig(manifest.restart, manifest.tol, cycles, manifest.recycle_dim)
    m = _make_preconditioner(manifest.precond, a)
    if method in _HPD_METHODS:
        if not a.hermitian:
            raise InvalidInputError(f"{method} needs a Hermitian positive definite matrix")
        if method == "cg":
            return cg_solve(a, b, tol=manifest.tol, maxiter=manifest.maxiter, m=m)
        w, _ = _load_deflation(manifest.deflation_space, a)
        if w is None:
            raise InvalidInputError(f"{method} needs --deflation-space (path or auto-eig:k)")
        basis = AugBasis.build(a, w)
        if method == "aug-cg":
            return augmented_cg_solve(a, b, basis, tol=manifest.tol, maxiter=manifest.maxiter)
        return deflated_cg_solve(a, b, basis, tol=manifest.tol, maxiter=manifest.maxiter)
    if method in ("gmres", "fgmres"):
        return fgmres_solve(a, b, config, m=m)
    if method == "gmres-dr":
        return gmres_dr_solve(a, b, config, m=m)
    if method == "gcro-dr":
        return gcro_dr_solve(a, b, config, m=m)
    if method == "gcro":
        return gcro_solve(a, b, config, m=m)
    w, wt = _load_deflation(manifest.deflation_space, a)
    if w is None:
        raise InvalidInputError(f"{method} needs --deflation-space (path or auto-eig:k)")
    if method == "defl-gmres":
        return deflated_gmres_ortho(a, w, b, config)
    return deflated_gmres_oblique(a, w, wt, b, config)


def _cycle_of(iteration: int, marks) -> int:
    cycle = 0
    for mark in marks:
        if iteration > mark:
            cycle += 1
    return cycle


def _write_history(path: str, report):
    events = {}
    for it, tag in report.history.events:
        events.setdefault(it, []).append(tag)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("iteration,cycle,relres,event\n")
        for i, res in enumerate(report.history.relres):
            tags = ";".join(events.get(i, []))
            fh.write(f"{i},{_cycle_of(i, report.history.cycle_marks)},{res:.17g},{tags}\n")


def _write_report(path: str, manifest: RunManifest, report, n: int, wall_ms: float):
    payload = {
        "method": manifest.method,
        "n": n,
        "iterations": report.iterations,
        "cycles": len(report.history.cycle_marks) + 1,
        "final_relres": report.final_relres,
        "converged": bool(report.converged),
        "breakdown_flag": bool(getattr(report, "breakdown", False)),
        "wall_time_ms": wall_ms,
    }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _suffixed(path: Optional[str], index: int) -> Optional[str]:
    if path is None:
        return None
    root, ext = os.path.splitext(path)
    return f"{root}.{index}{ext}"


def run_solve(manifest: RunManifest) -> int:
    try:
        manifest.validate()
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 64
    try:
        if manifest.sequence_manifest:
            return _run_sequence(manifest)
        if not manifest.matrix:
            raise InvalidInputError("--matrix is required")
        a = _load_operator(manifest.matrix, hermitian_hint=manifest.method in _HPD_METHODS)
        b = _load_rhs(manifest.rhs, a.dim)
        start = time.perf_counter()
        report = _dispatch(manifest, a, b)
        wall_ms = (time.perf_counter() - start) * 1000.0
        log.info(
            "%s on n=%d: %d iterations, relres %.3e, converged=%s",
            manifest.method, a.dim, report.iterations, report.final_relres, report.converged,
        )
        if manifest.history:
            _write_history(manifest.history, report)
        if manifest.report:
            _write_report(manifest.report, manifest, report, a.dim, wall_ms)
        return 0 if report.converged else 2
    except (KrylovError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _run_sequence(manifest: RunManifest) -> int:
    with open(manifest.sequence_manifest, "r", encoding="ascii") as fh:
        doc = json.load(fh)
    method = doc.get("method", manifest.method)
    if method not in METHODS:
        print(f"usage error: unknown method {method!r}", file=sys.stderr)
        return 64
    strategy = RecycleStrategy(
        doc.get("strategy", {}).get("kind", "none"),
        int(doc.get("strategy", {}).get("k", 0)),
    )
    restart = int(doc.get("restart", manifest.restart))
    tol = float(doc.get("tol", manifest.tol))
    maxiter = int(doc.get("maxiter", manifest.maxiter))
    config = SolveConfig(restart, tol, max(maxiter // restart, 1), strategy.k if strategy.kind == "harmonic-dr" else 0)

    hermitian_hint = method in _HPD_METHODS
    systems = []
    for entry in doc["systems"]:
        a = _load_operator(entry["matrix"], hermitian_hint)
        b = _load_rhs(entry.get("rhs", "ones"), a.dim)
        systems.append(SystemSpec(a, b, entry.get("method")))
    seq = SystemSequence(systems)

    start = time.perf_counter()
    reports = solve_sequence(seq, strategy, config, method=method)
    wall_ms = (time.perf_counter() - start) * 1000.0
    all_converged = all(r.converged for r in reports)
    for i, report in enumerate(reports):
        log.info("system %d: %d iterations, converged=%s", i, report.iterations, report.converged)
        if manifest.history:
            _write_history(_suffixed(manifest.history, i), report)
        if manifest.report:
            _write_report(_suffixed(manifest.report, i), manifest, report, seq.systems[i].operator.dim,
                          wall_ms / len(reports))
    return 0 if all_converged else 2


def run_spectrum(matrix: str, deflation_space: str, report_path: Optional[str]) -> int:
    try:
        a = _load_operator(matrix, hermitian_hint=True)
        if a.dim > 2000:
            print(f"error: spectrum diagnostics refuse n={a.dim} > 2000", file=sys.stderr)
            return 1
        ad = to_dense(a)
        payload = {"n": a.dim}
        if a.hermitian:
            eigs = np.linalg.eigvalsh((ad + ad.conj().T) / 2.0)
            payload["lambda_min"] = float(eigs[0])
            payload["lambda_max"] = float(eigs[-1])
            payload["kappa"] = float(eigs[-1] / eigs[0]) if eigs[0] > 0 else float("inf")
        else:
            eigs = np.linalg.eigvals(ad)
            sv = np.linalg.svd(ad, compute_uv=False)
            payload["lambda_min_modulus"] = float(np.min(np.abs(eigs)))
            payload["lambda_max_modulus"] = float(np.max(np.abs(eigs)))
            payload["kappa"] = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
        if deflation_space != "none":
            if not a.hermitian:
                raise InvalidInputError("kappa_eff diagnostics need a Hermitian matrix")
            w, _ = _load_deflation(deflation_space, a)
            payload["kappa_eff"] = effective_condition_number(a, AugBasis.build(a, w))
        text = json.dumps(payload, indent=2)
        if report_path:
            with open(report_path, "w", encoding="ascii") as fh:
                fh.write(text + "\n")
        else:
            print(text)
        return 0
    except (KrylovError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kry", description="Krylov solvers with augmentation, deflation and recycling")
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="solve one system or a sequence manifest")
    solve.add_argument("--matrix", help="Matrix Market coordinate file")
    solve.add_argument("--rhs", default="ones", help="Matrix Market array file or the token 'ones'")
    solve.add_argument("--method", default="gmres", help=f"one of {', '.join(METHODS)}")
    solve.add_argument("--restart", type=int, default=30)
    solve.add_argument("--recycle-dim", type=int, default=0)
    solve.add_argument("--tol", type=float, default=1e-8)
    solve.add_argument("--maxiter", type=int, default=3000)
    solve.add_argument("--precond", default="none", help="none | jacobi")
    solve.add_argument("--deflation-space", default="none", help="path | pathW,pathWt | auto-eig:k | none")
    solve.add_argument("--history", help="write per-iteration CSV here")
    solve.add_argument("--report", help="write report JSON here")
    solve.add_argument("--seed", type=int, default=42)
    solve.add_argument("--sequence-manifest", help="JSON manifest for a sequence of systems")

    spectrum = sub.add_parser("spectrum", help="dense spectral diagnostics (n <= 2000)")
    spectrum.add_argument("--matrix", required=True)
    spectrum.add_argument("--deflation-space", default="none")
    spectrum.add_argument("--report", help="write JSON here instead of stdout")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = _build_parser().parse_args(argv)
    if args.command == "spectrum":
        return run_spectrum(args.matrix, args.deflation_space, args.report)
    manifest = RunManifest(
        method=args.method,
        matrix=args.matrix,
        rhs=args.rhs,
        precond=args.precond,
        deflation_space=args.deflation_space,
        restart=args.restart,
        recycle_dim=args.recycle_dim,
        tol=args.tol,
        maxiter=args.maxiter,
        history=args.history,
        report=args.report,
        seed=args.seed,
        sequence_manifest=args.sequence_manifest,
    )
    return run_solve(manifest)


if __name__ == "__main__":
    sys.exit(main())
