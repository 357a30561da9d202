import numpy as np
import pytest

from kry.errors import InvalidInputError
from kry.gmres import (
    SolveConfig,
    arnoldi_expand,
    fgmres_cycle,
    fgmres_solve,
    new_arnoldi_state,
)
from kry.operators import (
    PreconditionerHandle,
    SpectrumSpec,
    make_test_operator,
    operator_from_dense,
)

from conftest import crandn


def reference_restarted_gmres(a_dense, b, restart, tol, max_cycles):
    """Straightforward restarted GMRES: full-cycle Arnoldi plus lstsq.

    Kept deliberately naive (no Givens, no early exit inside a cycle) as an
    independent cross-check.
    """
    n = len(b)
    x = np.zeros(n, dtype=complex)
    bnorm = np.linalg.norm(b)
    history = [1.0]
    for _ in range(max_cycles):
        r = b - a_dense @ x
        beta = np.linalg.norm(r)
        if beta / bnorm <= tol:
            break
        v = np.zeros((n, restart + 1), dtype=complex)
        h = np.zeros((restart + 2, restart + 1), dtype=complex)
        v[:, 0] = r / beta
        cols = restart
        for j in range(restart):
            s = a_dense @ v[:, j]
            for i in range(j + 1):
                h[i, j] = np.vdot(v[:, i], s)
                s = s - h[i, j] * v[:, i]
            h[j + 1, j] = np.linalg.norm(s)
            if h[j + 1, j] <= 1e-14:
                cols = j + 1
                break
            v[:, j + 1] = s / h[j + 1, j]
        c = np.zeros(cols + 1, dtype=complex)
        c[0] = beta
        y, *_ = np.linalg.lstsq(h[: cols + 1, :cols], c, rcond=None)
        x = x + v[:, :cols] @ y
        history.append(np.linalg.norm(b - a_dense @ x) / bnorm)
    return x, history


class TestArnoldiExpand:
    def test_eigvector_start_breaks_down(self):
        a = operator_from_dense(np.diag([1.0, 2.0]))
        state = new_arnoldi_state(2, 2)
        state.V[:, 0] = [1.0, 0.0]
        state.c[0] = 1.0
        arnoldi_expand(state, a)
        assert state.H[0, 0] == pytest.approx(1.0)
        assert state.H[1, 0] == pytest.approx(0.0, abs=1e-14)
        assert state.breakdown

    def test_swap_operator(self):
        a = operator_from_dense(np.array([[0.0, 1.0], [1.0, 0.0]]))
        state = new_arnoldi_state(2, 2)
        state.V[:, 0] = [1.0, 0.0]
        arnoldi_expand(state, a)
        assert state.H[0, 0] == pytest.approx(0.0, abs=1e-15)
        assert state.H[1, 0] == pytest.approx(1.0)
        assert state.V[:, 1] == pytest.approx([0.0, 1.0])

    def test_relation_after_five_steps(self, rng):
        dense = crandn(rng, 10, 10)
        a = operator_from_dense(dense)
        state = new_arnoldi_state(10, 5)
        v0 = crandn(rng, 10)
        state.V[:, 0] = v0 / np.linalg.norm(v0)
        for _ in range(5):
            arnoldi_expand(state, a)
        defect = dense @ state.directions() - state.basis() @ state.hbar()
        assert np.linalg.norm(defect) <= 1e-13 * np.linalg.norm(dense)

    def test_preconditioner_nan_aborts(self):
        a = operator_from_dense(np.eye(2))
        bad = PreconditionerHandle(lambda v: v * np.nan)
        state = new_arnoldi_state(2, 2)
        state.V[:, 0] = [1.0, 0.0]
        with pytest.raises(InvalidInputError):
            arnoldi_expand(state, a, bad)


class TestFgmresCycle:
    def test_identity_converges_immediately(self, rng):
        a = operator_from_dense(np.eye(5))
        b = crandn(rng, 5)
        cyc = fgmres_cycle(a, b, np.zeros(5), SolveConfig(restart=5, tol=1e-12), abs_tol=1e-12)
        assert len(cyc.step_residuals) == 1
        assert cyc.x == pytest.approx(b)

    def test_two_distinct_eigenvalues(self):
        a = operator_from_dense(np.diag([1.0, 2.0]))
        b = np.array([1.0, 1.0])
        cyc = fgmres_cycle(a, b, np.zeros(2), SolveConfig(restart=2, tol=1e-14))
        assert cyc.x == pytest.approx([1.0, 0.5], abs=1e-12)

    def test_full_space_matches_direct_solve(self, rng):
        dense = crandn(rng, 50, 50) + 5 * np.eye(50)
        a = operator_from_dense(dense)
        b = crandn(rng, 50)
        cyc = fgmres_cycle(a, b, np.zeros(50), SolveConfig(restart=50, tol=1e-16))
        x_ref = np.linalg.solve(dense, b)
        assert np.linalg.norm(b - dense @ cyc.x) <= 1e-10 * np.linalg.norm(b)
        assert np.linalg.norm(cyc.x - x_ref) <= 1e-8 * np.linalg.norm(x_ref)

    def test_petrov_galerkin_orthogonality(self, rng):
        dense = crandn(rng, 16, 16) + 4 * np.eye(16)
        a = operator_from_dense(dense)
        b = crandn(rng, 16)
        cyc = fgmres_cycle(a, b, np.zeros(16), SolveConfig(restart=6, tol=1e-30))
        r = b - dense @ cyc.x
        az = dense @ cyc.state.directions()
        assert np.linalg.norm(az.conj().T @ r) <= 1e-10 * np.linalg.norm(az) * np.linalg.norm(b)

    def test_estimated_residual_matches_true(self, rng):
        dense = crandn(rng, 20, 20) + 4 * np.eye(20)
        a = operator_from_dense(dense)
        b = crandn(rng, 20)
        cyc = fgmres_cycle(a, b, np.zeros(20), SolveConfig(restart=8, tol=1e-30))
        true = np.linalg.norm(b - dense @ cyc.x)
        assert cyc.residual_norm == pytest.approx(true, rel=1e-10)


class TestFgmresSolve:
    def test_exact_inverse_preconditioner(self, rng):
        d = rng.uniform(1, 10, 8)
        a = operator_from_dense(np.diag(d))
        m = PreconditionerHandle(lambda v: v / d)
        b = crandn(rng, 8)
        report = fgmres_solve(a, b, SolveConfig(restart=8, tol=1e-10), m=m)
        assert report.converged
        assert report.iterations == 1

    def test_distinct_eigenvalues_single_cycle(self, rng):
        a = operator_from_dense(np.diag(np.arange(1.0, 11.0)))
        b = crandn(rng, 10)
        report = fgmres_solve(a, b, SolveConfig(restart=10, tol=1e-10))
        assert report.converged
        assert len(report.history.cycle_marks) <= 1

    def test_restarted_matches_reference(self, rng):
        dense = np.diag(np.arange(1.0, 11.0))
        a = operator_from_dense(dense)
        b = crandn(rng, 10)
        report = fgmres_solve(a, b, SolveConfig(restart=3, tol=1e-8, max_cycles=100))
        _, ref_history = reference_restarted_gmres(dense, b, 3, 1e-8, 100)
        assert report.converged
        # cycle-boundary residuals agree with the independent implementation
        marks = [0] + [mark for mark in report.history.cycle_marks]
        ours = [report.history.relres[i] for i in marks]
        assert len(ours) >= len(ref_history) - 1
        for mine, ref in zip(ours, ref_history):
            assert mine == pytest.approx(ref, rel=1e-8, abs=1e-12)

    def test_constant_preconditioner_equals_right_preconditioned(self, rng):
        d = rng.uniform(1, 4, 12)
        dense = crandn(rng, 12, 12) + 5 * np.eye(12)
        a = operator_from_dense(dense)
        m = PreconditionerHandle(lambda v: v / d)
        b = crandn(rng, 12)
        config = SolveConfig(restart=4, tol=1e-30, max_cycles=3)
        report = fgmres_solve(a, b, config, m=m)
        # reference: plain GMRES on A M^{-1} in the t-variable, x = M^{-1} t
        am = dense @ np.diag(1.0 / d)
        t, hist = reference_restarted_gmres(am, b, 4, 1e-30, 3)
        x_ref = t / d
        assert np.linalg.norm(report.solution - x_ref) <= 1e-10 * max(np.linalg.norm(x_ref), 1.0)

    def test_residuals_nonincreasing_within_cycle(self, rng):
        dense = crandn(rng, 30, 30) + 4 * np.eye(30)
        a = operator_from_dense(dense)
        b = crandn(rng, 30)
        report = fgmres_solve(a, b, SolveConfig(restart=10, tol=1e-10, max_cycles=10))
        bounds = [0] + report.history.cycle_marks + [report.iterations]
        for lo, hi in zip(bounds, bounds[1:]):
            seg = report.history.relres[lo : hi + 1]
            assert all(seg[i + 1] <= seg[i] * (1 + 1e-12) for i in range(len(seg) - 1))

    def test_nonincreasing_across_restart_boundary(self, rng):
        dense = crandn(rng, 30, 30) + 4 * np.eye(30)
        a = operator_from_dense(dense)
        b = crandn(rng, 30)
        report = fgmres_solve(a, b, SolveConfig(restart=5, tol=1e-10, max_cycles=20))
        for mark in report.history.cycle_marks:
            if mark + 1 < len(report.history.relres):
                assert report.history.relres[mark + 1] <= report.history.relres[mark] * (1 + 1e-10)

    def test_orthonormality_drift_100_steps(self, rng):
        spec = SpectrumSpec(tuple(rng.uniform(1, 3, 120)), hermitian=False, mixing_seed=2)
        a = make_test_operator(spec)
        b = crandn(rng, 120)
        cyc = fgmres_cycle(a, b, np.zeros(120), SolveConfig(restart=100, tol=1e-30))
        j = cyc.state.j
        v = cyc.state.basis()
        assert np.linalg.norm(v.conj().T @ v - np.eye(j + 1)) <= 1e-12 * (j + 1)

    def test_final_relres_is_recomputed_truth(self, rng):
        dense = crandn(rng, 15, 15) + 4 * np.eye(15)
        a = operator_from_dense(dense)
        b = crandn(rng, 15)
        report = fgmres_solve(a, b, SolveConfig(restart=5, tol=1e-9, max_cycles=50))
        truth = np.linalg.norm(b - dense @ report.solution) / np.linalg.norm(b)
        assert report.final_relres == pytest.approx(truth, abs=1e-10)

    def test_zero_initial_residual(self):
        a = operator_from_dense(np.eye(3))
        b = np.ones(3)
        report = fgmres_solve(a, b, SolveConfig(restart=3, tol=1e-10), x0=np.ones(3))
        assert report.converged
        assert report.iterations == 0
