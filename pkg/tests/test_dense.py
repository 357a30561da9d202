import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kry.dense import (
    dense_eig,
    hermitian_solve,
    hessenberg_lsq,
    orthonormalize_against,
    thin_qr,
)
from kry.errors import IndefiniteGramError, InvalidInputError

from conftest import crandn, random_orthonormal


def e(n, i):
    v = np.zeros(n, dtype=complex)
    v[i] = 1.0
    return v


class TestOrthonormalize:
    def test_already_orthogonal(self):
        coeffs, tail, unit = orthonormalize_against(e(3, 1), e(3, 0)[:, None])
        assert coeffs == pytest.approx([0.0])
        assert tail == pytest.approx(1.0)
        assert unit == pytest.approx(e(3, 1))

    def test_vector_in_span(self):
        coeffs, tail, unit = orthonormalize_against(e(3, 0), e(3, 0)[:, None])
        assert coeffs == pytest.approx([1.0])
        assert tail <= 1e-14
        assert unit is None

    def test_remainder_orthogonal_to_basis(self, rng):
        basis = random_orthonormal(rng, 20, 5)
        v = crandn(rng, 20)
        coeffs, tail, unit = orthonormalize_against(v, basis)
        assert np.linalg.norm(basis.conj().T @ unit) <= 1e-13
        # coefficients reconstruct the projection
        assert np.linalg.norm(basis @ coeffs + tail * unit - v) <= 1e-12 * np.linalg.norm(v)

    def test_nonfinite_rejected(self):
        with pytest.raises(InvalidInputError):
            orthonormalize_against(np.array([np.nan, 1.0]), np.zeros((2, 0)))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_idempotent(self, seed):
        r = np.random.default_rng(seed)
        basis = random_orthonormal(r, 12, 4)
        v = crandn(r, 12)
        _, _, unit = orthonormalize_against(v, basis)
        if unit is None:
            return
        coeffs2, tail2, _ = orthonormalize_against(unit, basis)
        assert np.linalg.norm(coeffs2) <= 1e-13
        assert tail2 == pytest.approx(1.0, abs=1e-12)


class TestThinQr:
    def test_identity(self):
        res = thin_qr(np.eye(3))
        assert res.Q == pytest.approx(np.eye(3))
        assert res.R == pytest.approx(np.eye(3))
        assert res.rank == 3

    def test_single_column(self):
        res = thin_qr(np.array([[3.0], [4.0]]))
        assert res.Q[:, 0] == pytest.approx([0.6, 0.8])
        assert res.R[0, 0] == pytest.approx(5.0)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_reconstruction_and_orthonormality(self, seed):
        r = np.random.default_rng(seed)
        m = crandn(r, 8, 3)
        res = thin_qr(m)
        scale = np.linalg.norm(m)
        assert np.linalg.norm(m - res.Q @ res.R) <= 1e-13 * scale
        assert np.linalg.norm(res.Q.conj().T @ res.Q - np.eye(3)) <= 1e-13
        assert np.all(np.diag(res.R).imag == 0)
        assert np.all(np.diag(res.R).real >= 0)

    def test_rank_deficiency_reported(self, rng):
        col = crandn(rng, 6)
        m = np.column_stack([col, 2 * col, crandn(rng, 6)])
        res = thin_qr(m)
        assert res.rank == 2
        assert res.R[1, 1] == 0.0

    def test_wide_rejected(self):
        with pytest.raises(InvalidInputError):
            thin_qr(np.ones((2, 3)))


class TestHessenbergLsq:
    def test_exact_solve(self):
        res = hessenberg_lsq(np.array([[1.0], [0.0]]), np.array([2.5, 0.0]))
        assert res.solution == pytest.approx([2.5])
        assert res.residual_norm == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal_column(self):
        res = hessenberg_lsq(np.array([[0.0], [1.0]]), np.array([1.0, 0.0]))
        assert res.solution == pytest.approx([0.0], abs=1e-15)
        assert res.residual_norm == pytest.approx(1.0)

    def test_matches_normal_equations(self, rng):
        h = np.triu(crandn(rng, 6, 5), -1)
        c = crandn(rng, 6)
        res = hessenberg_lsq(h, c)
        gram = h.conj().T @ h
        y_ref = np.linalg.solve(gram, h.conj().T @ c)
        assert np.linalg.norm(res.solution - y_ref) <= 1e-12 * max(np.linalg.norm(y_ref), 1.0)
        assert res.residual_norm == pytest.approx(np.linalg.norm(c - h @ y_ref), rel=1e-11)

    def test_dense_leading_block_accepted(self, rng):
        h = crandn(rng, 7, 6)  # deflated-restart cycles are not Hessenberg
        c = crandn(rng, 7)
        res = hessenberg_lsq(h, c)
        y_ref, *_ = np.linalg.lstsq(h, c, rcond=None)
        assert np.linalg.norm(res.solution - y_ref) <= 1e-11 * max(np.linalg.norm(y_ref), 1.0)

    def test_singular_flagged(self):
        h = np.array([[0.0], [0.0]])
        res = hessenberg_lsq(h, np.array([1.0, 1.0]))
        assert res.singular
        assert res.solution == pytest.approx([0.0])


class TestDenseEig:
    def test_diagonal(self):
        pairs = dense_eig(np.diag([2.0, 3.0]), order="smallest-modulus")
        assert pairs.values == pytest.approx([2.0, 3.0])

    def test_rotation_block(self):
        pairs = dense_eig(np.array([[0.0, 1.0], [-1.0, 0.0]]))
        assert sorted(pairs.values, key=lambda z: z.imag) == pytest.approx([-1j, 1j])

    def test_residual_and_trace(self, rng):
        b = crandn(rng, 12, 12)
        pairs = dense_eig(b)
        scale = np.linalg.norm(b)
        assert np.max(pairs.residuals) <= 1e-10 * scale
        assert np.sum(pairs.values) == pytest.approx(np.trace(b), abs=1e-10 * scale)
        assert np.linalg.norm(pairs.vectors, axis=0) == pytest.approx(np.ones(12))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_diagonal_multiset(self, seed):
        r = np.random.default_rng(seed)
        d = r.uniform(-5, 5, 7)
        pairs = dense_eig(np.diag(d))
        assert np.sort(pairs.values.real) == pytest.approx(np.sort(d), abs=1e-12)


class TestHermitianSolve:
    def test_identity(self):
        assert hermitian_solve(np.eye(2), np.array([1.0, 0.0])) == pytest.approx([1.0, 0.0])

    def test_diagonal(self):
        x = hermitian_solve(np.diag([4.0, 9.0]), np.array([4.0, 9.0]))
        assert x == pytest.approx([1.0, 1.0])

    def test_random_spd_multiply_back(self, rng):
        g = crandn(rng, 6, 6)
        g = g @ g.conj().T + 6 * np.eye(6)
        rhs = crandn(rng, 6, 2)
        x = hermitian_solve(g, rhs)
        assert np.linalg.norm(g @ x - rhs) <= 1e-12 * np.linalg.norm(g) * max(np.linalg.norm(x), 1.0)

    def test_non_hermitian_rejected(self, rng):
        with pytest.raises(InvalidInputError):
            hermitian_solve(crandn(rng, 3, 3), np.zeros(3))

    def test_indefinite_rejected(self):
        with pytest.raises(IndefiniteGramError):
            hermitian_solve(np.diag([1.0, -1.0]), np.zeros(2))

    def test_near_zero_pivot_rejected(self):
        with pytest.raises(IndefiniteGramError):
            hermitian_solve(np.diag([1.0, 1e-16]), np.zeros(2))
