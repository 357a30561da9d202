"""System operators: CSR storage, Matrix Market ingestion, spectrum generators.

Operators are passed around as actions (``OperatorHandle``); nothing in the
solver stack ever requires the adjoint action, so matrix-free operators are
first class. Preconditioners are likewise actions only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dense import as_matrix, as_vector, dense_eig
from .errors import (
    InvalidInputError,
    ParseError,
    SingularOperatorError,
    UnsupportedFormatError,
)


@dataclass
class CsrMatrix:
    """Square sparse matrix in compressed-sparse-row form.

    Immutable after construction by convention; ``row_ids`` is a derived
    expansion of ``row_offsets`` cached for the matvec.
    """

    dim: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    row_ids: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.row_offsets = np.asarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(self.col_indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.row_offsets.shape != (self.dim + 1,):
            raise InvalidInputError("row_offsets must have dim+1 entries")
        if np.any(np.diff(self.row_offsets) < 0):
            raise InvalidInputError("row_offsets must be nondecreasing")
        if self.col_indices.shape != self.values.shape:
            raise InvalidInputError("col_indices and values must align")
        if self.col_indices.size and (
            self.col_indices.min() < 0 or self.col_indices.max() >= self.dim
        ):
            raise InvalidInputError("column index out of range")
        self.row_ids = np.repeat(
            np.arange(self.dim, dtype=np.int64), np.diff(self.row_offsets)
        )

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim), dtype=np.complex128)
        out[self.row_ids, self.col_indices] = self.values
        return out


def csr_from_entries(dim, rows, cols, vals) -> CsrMatrix:
    """Assemble CSR from coordinate triplets, summing duplicate positions."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.complex128)
    if rows.size:
        if rows.min() < 0 or rows.max() >= dim or cols.min() < 0 or cols.max() >= dim:
            raise InvalidInputError("coordinate entry out of range")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        keys = rows * dim + cols
        uniq, inverse = np.unique(keys, return_inverse=True)
        summed = np.zeros(uniq.size, dtype=np.complex128)
        np.add.at(summed, inverse, vals)
        rows, cols, vals = uniq // dim, uniq % dim, summed
    offsets = np.zeros(dim + 1, dtype=np.int64)
    np.add.at(offsets[1:], rows, 1)
    offsets = np.cumsum(offsets)
    return CsrMatrix(dim, offsets, cols, vals)


def csr_apply(a: CsrMatrix, x) -> np.ndarray:
    """Exact sparse row-wise product ``A x``."""
    x = as_vector(x)
    if x.shape[0] != a.dim:
        raise InvalidInputError(f"csr_apply: vector length {x.shape[0]} != {a.dim}")
    out = np.zeros(a.dim, dtype=np.complex128)
    np.add.at(out, a.row_ids, a.values * x[a.col_indices])
    return out


@dataclass(frozen=True)
class OperatorHandle:
    """Action ``x -> A x`` of a nonsingular system matrix.

    ``hermitian`` is a caller claim, checked statistically by the test suite,
    relied on by the CG path. ``csr``/``dense`` are optional explicit
    backings used by diagnostics.
    """

    dim: int
    apply: Callable[[np.ndarray], np.ndarray]
    hermitian: bool = False
    csr: Optional[CsrMatrix] = None
    dense: Optional[np.ndarray] = None


@dataclass(frozen=True)
class PreconditionerHandle:
    """Action ``v -> M^{-1} v``; ``flexible`` marks per-call variation."""

    apply: Callable[[np.ndarray], np.ndarray]
    flexible: bool = False


def operator_from_csr(a: CsrMatrix, hermitian=False) -> OperatorHandle:
    return OperatorHandle(a.dim, lambda x: csr_apply(a, x), hermitian, csr=a)


def operator_from_dense(m, hermitian=None) -> OperatorHandle:
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise InvalidInputError("operator matrix must be square")
    if hermitian is None:
        hermitian = bool(
            np.linalg.norm(m - m.conj().T) <= 1e-12 * max(np.linalg.norm(m), 1.0)
        )
    return OperatorHandle(m.shape[0], lambda x: m @ x, hermitian, dense=m)


def to_dense(a: OperatorHandle) -> np.ndarray:
    """Materialize the operator; diagnostics-only path (desk scale)."""
    if a.dense is not None:
        return a.dense
    if a.csr is not None:
        return a.csr.to_dense()
    return a.apply(np.eye(a.dim, dtype=np.complex128))


# ---------------------------------------------------------------------------
# Matrix Market ingestion
# ---------------------------------------------------------------------------

_HEADER_PREFIX = "%%matrixmarket"


def _parse_header(line, lineno):
    parts = line.strip().lower().split()
    if len(parts) != 5 or parts[0] != _HEADER_PREFIX or parts[1] != "matrix":
        raise ParseError(f"bad Matrix Market header: {line.strip()!r}", lineno)
    fmt, fld, sym = parts[2], parts[3], parts[4]
    if fld == "pattern":
        raise UnsupportedFormatError("pattern field is not supported", lineno)
    if fld not in ("real", "complex"):
        raise UnsupportedFormatError(f"unsupported field {fld!r}", lineno)
    if sym not in ("general", "symmetric", "hermitian"):
        raise UnsupportedFormatError(f"unsupported symmetry {sym!r}", lineno)
    return fmt, fld, sym


def _data_lines(path):
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.readlines()
    if not lines:
        raise ParseError("empty file", 1)
    header = _parse_header(lines[0], 1)
    body = [
        (i + 1, ln.strip())
        for i, ln in enumerate(lines)
        if i > 0 and ln.strip() and not ln.lstrip().startswith("%")
    ]
    if not body:
        raise ParseError("missing size line", len(lines))
    return header, body


def _parse_value(tokens, fld, lineno):
    try:
        if fld == "complex":
            if len(tokens) != 2:
                raise ValueError("expected two value tokens")
            return complex(float(tokens[0]), float(tokens[1]))
        if len(tokens) != 1:
            raise ValueError("expected one value token")
        return complex(float(tokens[0]), 0.0)
    except ValueError as exc:
        raise ParseError(f"bad entry values: {exc}", lineno) from None


def read_matrix_market(path) -> CsrMatrix:
    """Read a coordinate-format Matrix Market file into CSR.

    Indices are converted to 0-based; symmetric/hermitian storage is expanded
    to the full pattern; duplicate coordinates are summed. Array format and
    pattern fields raise :class:`UnsupportedFormatError`; malformed content
    raises :class:`ParseError` carrying the line number.
    """
    (fmt, fld, sym), body = _data_lines(path)
    if fmt != "coordinate":
        raise UnsupportedFormatError(
            f"matrix reader accepts coordinate format only, got {fmt!r}", 1
        )
    lineno, size_line = body[0]
    toks = size_line.split()
    if len(toks) != 3:
        raise ParseError(f"size line must be 'rows cols nnz', got {size_line!r}", lineno)
    try:
        nrows, ncols, nnz = (int(t) for t in toks)
    except ValueError:
        raise ParseError(f"non-integer size line {size_line!r}", lineno) from None
    if nrows != ncols:
        raise UnsupportedFormatError(f"matrix must be square, got {nrows}x{ncols}", lineno)
    if len(body) - 1 != nnz:
        raise ParseError(f"expected {nnz} entries, found {len(body) - 1}", lineno)

    rows, cols, vals = [], [], []
    ntoks = 4 if fld == "complex" else 3
    for lineno, line in body[1:]:
        toks = line.split()
        if len(toks) != ntoks:
            raise ParseError(f"expected {ntoks} tokens, got {len(toks)}", lineno)
        try:
            i, j = int(toks[0]) - 1, int(toks[1]) - 1
        except ValueError:
            raise ParseError(f"bad indices in {line!r}", lineno) from None
        if not (0 <= i < nrows and 0 <= j < ncols):
            raise ParseError(f"index out of range in {line!r}", lineno)
        v = _parse_value(toks[2:], fld, lineno)
        rows.append(i)
        cols.append(j)
        vals.append(v)
        if sym != "general" and i != j:
            rows.append(j)
            cols.append(i)
            vals.append(v.conjugate() if sym == "hermitian" else v)
    return csr_from_entries(nrows, rows, cols, vals)


def read_dense_array(path) -> np.ndarray:
    """Read an array-format Matrix Market file (column-major dense block)."""
    (fmt, fld, sym), body = _data_lines(path)
    if fmt != "array":
        raise UnsupportedFormatError(
            f"dense reader accepts array format only, got {fmt!r}", 1
        )
    if sym != "general":
        raise UnsupportedFormatError("dense reader accepts general symmetry only", 1)
    lineno, size_line = body[0]
    toks = size_line.split()
    if len(toks) != 2:
        raise ParseError(f"size line must be 'rows cols', got {size_line!r}", lineno)
    try:
        nrows, ncols = int(toks[0]), int(toks[1])
    except ValueError:
        raise ParseError(f"non-integer size line {size_line!r}", lineno) from None
    if len(body) - 1 != nrows * ncols:
        raise ParseError(
            f"expected {nrows * ncols} values, found {len(body) - 1}", lineno
        )
    flat = np.empty(nrows * ncols, dtype=np.complex128)
    for pos, (lineno, line) in enumerate(body[1:]):
        flat[pos] = _parse_value(line.split(), fld, lineno)
    return flat.reshape((ncols, nrows)).T


def write_matrix_market(path, a: CsrMatrix):
    """Write CSR as coordinate complex general (1-based indices)."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("%%MatrixMarket matrix coordinate complex general\n")
        fh.write(f"{a.dim} {a.dim} {a.nnz}\n")
        for r, c, v in zip(a.row_ids, a.col_indices, a.values):
            fh.write(f"{r + 1} {c + 1} {v.real:.17g} {v.imag:.17g}\n")


def write_dense_array(path, m):
    """Write a dense block as array complex general (column-major)."""
    m = np.atleast_2d(np.asarray(m, dtype=np.complex128))
    if m.shape[0] == 1 and m.size > 1:
        m = m.T
    with open(path, "w", encoding="ascii") as fh:
        fh.write("%%MatrixMarket matrix array complex general\n")
        fh.write(f"{m.shape[0]} {m.shape[1]}\n")
        for v in m.T.ravel():
            fh.write(f"{v.real:.17g} {v.imag:.17g}\n")


# ---------------------------------------------------------------------------
# Synthetic spectra for tests and benchmarks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpectrumSpec:
    """Prescribed eigenvalues plus an optional seeded mixing similarity.

    ``mixing_seed=None`` yields the plain diagonal matrix. Hermitian
    operators mix with a unitary; non-Hermitian ones with a unitary times a
    mild upper-triangular perturbation of 2-norm ``nonnormality``.
    """

    eigenvalues: tuple
    hermitian: bool = True
    mixing_seed: Optional[int] = None
    nonnormality: float = 0.5


@dataclass(frozen=True)
class SpectrumModel:
    """Explicit model behind a synthetic operator: matrix and eigenbases."""

    matrix: np.ndarray
    eigenvalues: np.ndarray
    right_vectors: np.ndarray
    left_vectors: np.ndarray


def build_spectrum(spec: SpectrumSpec) -> SpectrumModel:
    lam = np.asarray(spec.eigenvalues, dtype=np.complex128)
    if lam.ndim != 1 or lam.size == 0:
        raise InvalidInputError("spectrum must be a nonempty eigenvalue list")
    if np.any(np.abs(lam) == 0.0):
        raise SingularOperatorError("zero eigenvalue requested; operators must be nonsingular")
    if spec.hermitian and np.any(np.abs(lam.imag) > 0):
        raise InvalidInputError("hermitian spectrum must be real")
    n = lam.size
    if spec.mixing_seed is None:
        eye = np.eye(n, dtype=np.complex128)
        return SpectrumModel(np.diag(lam), lam, eye, eye.copy())
    rng = np.random.default_rng(spec.mixing_seed)
    g = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    q, _ = np.linalg.qr(g)
    if spec.hermitian:
        a = (q * lam.real) @ q.conj().T
        a = (a + a.conj().T) / 2.0
        return SpectrumModel(a, lam, q, q.copy())
    upper = np.triu(rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)), 1)
    norm2 = np.linalg.norm(upper, 2)
    if norm2 > 0:
        upper *= spec.nonnormality / norm2
    s = q @ (np.eye(n) + upper)
    s_inv = np.linalg.inv(s)
    a = (s * lam) @ s_inv
    return SpectrumModel(a, lam, s, s_inv.conj().T)


def make_test_operator(spec: SpectrumSpec) -> OperatorHandle:
    """Operator with the prescribed spectrum; see :class:`SpectrumSpec`."""
    model = build_spectrum(spec)
    return operator_from_dense(model.matrix, hermitian=spec.hermitian)


def clustered_nonnormal_operator(
    n: int,
    seed: int,
    small=(1e-3, 1e-3),
    bulk=(1.0, 2.0),
    pair_link: float = 1.0,
    chain: float = 0.5,
) -> OperatorHandle:
    """Benchmark operator: a linked cluster of small eigenvalues plus a
    non-normal bulk chain, wrapped in a unitary similarity.

    Built in Schur form, so the eigenvalues are exactly the prescribed ones:
    ``small`` plus uniform draws from ``bulk``. ``pair_link`` couples the
    small cluster (a Jordan link when the values coincide); ``chain`` sets
    the superdiagonal of the bulk block, which slows restarted solvers
    without moving the spectrum.
    """
    rng = np.random.default_rng(seed)
    ns = len(small)
    t = np.zeros((n, n), dtype=np.complex128)
    diag = np.concatenate([np.asarray(small, dtype=np.complex128), rng.uniform(bulk[0], bulk[1], n - ns)])
    np.fill_diagonal(t, diag)
    for i in range(ns - 1):
        t[i, i + 1] = pair_link
    for i in range(ns, n - 1):
        t[i, i + 1] = chain
    g = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    q, _ = np.linalg.qr(g)
    return operator_from_dense(q @ t @ q.conj().T, hermitian=False)


def verify_linearity(a: OperatorHandle, rng, trials=3, rtol=1e-12) -> bool:
    """Statistical linearity check ``A(alpha x + y) = alpha Ax + Ay``."""
    for _ in range(trials):
        x = rng.standard_normal(a.dim) + 1j * rng.standard_normal(a.dim)
        y = rng.standard_normal(a.dim) + 1j * rng.standard_normal(a.dim)
        alpha = complex(rng.standard_normal(), rng.standard_normal())
        lhs = a.apply(alpha * x + y)
        rhs = alpha * a.apply(x) + a.apply(y)
        scale = np.linalg.norm(rhs)
        if np.linalg.norm(lhs - rhs) > rtol * max(scale, 1.0):
            return False
    return True
