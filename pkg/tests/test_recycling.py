import numpy as np
import pytest

from kry.dense import dense_eig
from kry.errors import HarmonicBreakdownError, InvalidInputError
from kry.gmres import SolveConfig, fgmres_cycle, fgmres_solve
from kry.operators import (
    PreconditionerHandle,
    SpectrumSpec,
    build_spectrum,
    clustered_nonnormal_operator,
    make_test_operator,
    operator_from_dense,
)
from kry.recycling import (
    HarmonicSpec,
    RecycleSpace,
    augment_with_subspace,
    dr_compress,
    gmres_dr_solve,
    harmonic_ritz,
    harvest_from_snapshot,
    load_recycle_space,
    recycle_defects,
    save_recycle_space,
)

from conftest import crandn


def run_arnoldi_cycle(a, b, steps, tol=1e-30):
    return fgmres_cycle(a, b, np.zeros(a.dim, dtype=complex), SolveConfig(restart=steps, tol=1e-12), abs_tol=tol)


class TestHarmonicRitz:
    def test_zero_subdiagonal_reduces_to_eigenproblem(self, rng):
        h_sq = np.triu(crandn(rng, 5, 5), -1) + 3 * np.eye(5)
        hbar = np.vstack([h_sq, np.zeros((1, 5))])
        p, theta = harmonic_ritz(hbar, HarmonicSpec(k=2))
        eigs = np.sort_complex(np.linalg.eigvals(h_sq))
        order = np.argsort(np.abs(eigs))
        expected = eigs[order[:2]]
        assert np.sort(np.abs(theta)) == pytest.approx(np.sort(np.abs(expected)), rel=1e-9)

    def test_full_krylov_space_gives_exact_spectrum(self, rng):
        a = operator_from_dense(np.diag([1.0, 2.0, 3.0]))
        b = crandn(rng, 3)
        cyc = run_arnoldi_cycle(a, b, 3)
        p, theta = harmonic_ritz(cyc.state.hbar(), HarmonicSpec(k=2))
        assert np.sort(theta.real) == pytest.approx([1.0, 2.0], abs=1e-9)

    def test_definition_orthogonality(self, rng):
        dense = crandn(rng, 10, 10) + 3 * np.eye(10)
        a = operator_from_dense(dense)
        b = crandn(rng, 10)
        cyc = run_arnoldi_cycle(a, b, 6)
        state = cyc.state
        p, theta = harmonic_ritz(state.hbar(), HarmonicSpec(k=2))
        # restriction of the operator used in the harmonic definition
        bop = dense @ state.directions() @ state.basis()[:, :6].conj().T
        bu = bop @ state.basis()[:, :6]
        for j in range(p.shape[1]):
            y = state.basis()[:, :6] @ p[:, j]
            defect = (bop @ y - theta[j] * y).conj() @ bu
            assert np.linalg.norm(defect) <= 1e-9 * np.linalg.norm(bu)

    def test_selection_modes(self, rng):
        a = operator_from_dense(np.diag([1.0, 2.0, 3.0, 4.0, 5.0]))
        b = crandn(rng, 5)
        cyc = run_arnoldi_cycle(a, b, 5)
        _, smallest = harmonic_ritz(cyc.state.hbar(), HarmonicSpec(k=2))
        _, largest = harmonic_ritz(cyc.state.hbar(), HarmonicSpec(k=2, which="largest-modulus"))
        _, near = harmonic_ritz(cyc.state.hbar(), HarmonicSpec(k=1, which="nearest-to-target", target=3.1))
        assert np.sort(smallest.real) == pytest.approx([1.0, 2.0], abs=1e-8)
        assert np.sort(largest.real) == pytest.approx([4.0, 5.0], abs=1e-8)
        assert near.real == pytest.approx([3.0], abs=1e-8)

    def test_conjugate_pair_kept_together(self, rng):
        # real operator whose two smallest-modulus eigenvalues are conjugate
        blocks = [np.array([[0.2, 0.3], [-0.3, 0.2]])]
        blocks += [np.array([[v]]) for v in rng.uniform(1.0, 2.0, 8)]
        dense = np.zeros((10, 10))
        at = 0
        for blk in blocks:
            w = blk.shape[0]
            dense[at : at + w, at : at + w] = blk
            at += w
        q, _ = np.linalg.qr(rng.standard_normal((10, 10)))
        a = operator_from_dense(q @ dense @ q.T)
        b = rng.standard_normal(10)
        cyc = run_arnoldi_cycle(a, b, 8)
        p, theta = harmonic_ritz(cyc.state.hbar(), HarmonicSpec(k=1))
        assert p.shape[1] == 2
        assert theta[1] == pytest.approx(np.conj(theta[0]), rel=1e-6)

    def test_singular_block_raises(self):
        hbar = np.zeros((4, 3))
        hbar[3, 2] = 1.0
        with pytest.raises(HarmonicBreakdownError):
            harmonic_ritz(hbar, HarmonicSpec(k=1))

    def test_field_of_values_bound_on_normal_operator(self, rng):
        lam = np.exp(1j * np.pi / 6) * rng.uniform(0.5, 2.0, 30)
        q, _ = np.linalg.qr(crandn(rng, 30, 30))
        a = operator_from_dense((q * lam) @ q.conj().T)
        b = crandn(rng, 30)
        cyc = run_arnoldi_cycle(a, b, 10)
        _, theta = harmonic_ritz(cyc.state.hbar(), HarmonicSpec(k=4))
        assert np.max(np.abs(theta)) <= np.max(np.abs(lam)) * (1 + 1e-10)


class TestDrCompress:
    def test_k_zero_keeps_residual_direction(self, rng):
        dense = crandn(rng, 8, 8) + 3 * np.eye(8)
        a = operator_from_dense(dense)
        b = crandn(rng, 8)
        cyc = run_arnoldi_cycle(a, b, 4)
        space = dr_compress(cyc.state, np.zeros((4, 0)), cyc.y)
        assert space.k == 0
        r = b - dense @ cyc.x
        direction = space.Vk1[:, 0]
        cos = abs(np.vdot(direction, r)) / np.linalg.norm(r)
        assert cos == pytest.approx(1.0, abs=1e-10)

    def test_postconditions_random_cycle(self, rng):
        dense = crandn(rng, 20, 20) + 4 * np.eye(20)
        a = operator_from_dense(dense)
        b = crandn(rng, 20)
        cyc = run_arnoldi_cycle(a, b, 10)
        p, theta = harmonic_ritz(cyc.state.hbar(), HarmonicSpec(k=3))
        space = dr_compress(cyc.state, p, cyc.y, theta)
        rel, orth = recycle_defects(space, a)
        scale = np.linalg.norm(dense) * max(np.linalg.norm(space.Zk), 1.0)
        assert rel <= 1e-10 * scale
        assert orth <= 1e-11
        # range property: [Y_k, r0] spans the new basis
        yk = cyc.state.basis()[:, :10] @ p
        r0 = b - dense @ cyc.x
        combined = np.column_stack([yk, r0])
        proj = combined - space.Vk1 @ (space.Vk1.conj().T @ combined)
        assert np.linalg.norm(proj) <= 1e-10 * np.linalg.norm(combined)
        assert np.linalg.matrix_rank(combined, tol=1e-10 * np.linalg.norm(combined)) == space.k + 1

    def test_exact_invariant_subspace(self, rng):
        # right-hand side inside a 4-dim invariant subspace: happy breakdown,
        # then the compressed block carries the harmonic values on its spectrum
        a = operator_from_dense(np.diag([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
        b = np.zeros(6, dtype=complex)
        b[:4] = crandn(rng, 4)
        cyc = run_arnoldi_cycle(a, b, 5)
        assert cyc.breakdown
        state = cyc.state
        p, theta = harmonic_ritz(state.hbar(), HarmonicSpec(k=2))
        space = dr_compress(state, p, cyc.y, theta)
        assert "recycle-degenerate" in space.events
        hk = space.Hk[: space.k, : space.k]
        eigs = np.sort(np.linalg.eigvals(hk).real)
        assert eigs == pytest.approx(np.sort(theta.real), abs=1e-8)
        rel, orth = recycle_defects(space, a)
        assert rel <= 1e-10 * np.linalg.norm(a.dense)
        assert orth <= 1e-11

    def test_shape_mismatch_rejected(self, rng):
        dense = crandn(rng, 8, 8) + 3 * np.eye(8)
        a = operator_from_dense(dense)
        cyc = run_arnoldi_cycle(a, crandn(rng, 8), 4)
        with pytest.raises(InvalidInputError):
            dr_compress(cyc.state, np.zeros((7, 2)), cyc.y)


class TestAugmentWithSubspace:
    def test_empty_augmentation_equals_cycle(self, rng):
        dense = crandn(rng, 12, 12) + 4 * np.eye(12)
        a = operator_from_dense(dense)
        b = crandn(rng, 12)
        aug = augment_with_subspace(a, np.zeros((12, 0)), b, 5)
        plain = fgmres_cycle(a, b, np.zeros(12), SolveConfig(restart=5, tol=1e-12))
        assert aug.x == pytest.approx(plain.x, abs=1e-12)

    def test_eigen_direction_completes_space(self, rng):
        a = operator_from_dense(np.diag([1.0, 2.0, 3.0]))
        w = np.array([[0.0], [0.0], [1.0]], dtype=complex)
        b = crandn(rng, 3)
        aug = augment_with_subspace(a, w, b, 2)
        x_ref = np.linalg.solve(a.dense, b)
        assert aug.x == pytest.approx(x_ref, abs=1e-10 * np.linalg.norm(x_ref))

    def test_exact_error_direction(self, rng):
        dense = crandn(rng, 10, 10) + 4 * np.eye(10)
        a = operator_from_dense(dense)
        b = crandn(rng, 10)
        w = np.linalg.solve(dense, b)[:, None]
        aug = augment_with_subspace(a, w, b, 2)
        assert np.linalg.norm(b - dense @ aug.x) <= 1e-12 * np.linalg.norm(b)

    def test_dependent_direction_truncates(self, rng):
        a = operator_from_dense(np.diag([1.0, 2.0, 3.0]))
        b = np.array([1.0, 1.0, 1.0], dtype=complex)
        # the full Krylov space already contains this augmentation vector
        w = b[:, None]
        aug = augment_with_subspace(a, w, b, 3)
        assert aug.truncated
        assert aug.state.j == 3


class TestGmresDrSolve:
    def test_k_zero_matches_plain_history(self, rng):
        dense = crandn(rng, 25, 25) + 3 * np.eye(25)
        a = operator_from_dense(dense)
        b = crandn(rng, 25)
        cfg = SolveConfig(restart=6, tol=1e-9, max_cycles=30, augment=0)
        dr = gmres_dr_solve(a, b, cfg)
        plain = fgmres_solve(a, b, cfg)
        assert dr.history.relres == pytest.approx(plain.history.relres, rel=1e-12)

    def test_hermitian_cluster_benefit_and_rate(self, rng):
        lam = np.concatenate([[1e-3], rng.uniform(1.0, 2.0, 99)])
        a = make_test_operator(SpectrumSpec(tuple(lam), hermitian=True, mixing_seed=5))
        b = crandn(rng, 100)
        cfg = SolveConfig(restart=20, tol=1e-12, max_cycles=200, augment=4)
        dr = gmres_dr_solve(a, b, cfg)
        plain = fgmres_solve(a, b, SolveConfig(restart=20, tol=1e-12, max_cycles=200))
        assert dr.converged
        assert dr.iterations < plain.iterations
        # after the first cycle the rate matches GMRES on the deflated complement
        model = build_spectrum(SpectrumSpec(tuple(lam), hermitian=True, mixing_seed=5))
        keep = np.argsort(lam)[1:]
        restricted = operator_from_dense(np.diag(lam[keep]).astype(complex))
        b_restricted = (model.right_vectors.conj().T @ b)[keep]
        ref = fgmres_solve(restricted, b_restricted, SolveConfig(restart=20, tol=1e-12, max_cycles=200))
        first_mark = dr.history.cycle_marks[0]
        tail = dr.history.relres[first_mark:]
        steps = len(tail) - 1
        rate_dr = (tail[-1] / tail[0]) ** (1.0 / steps)
        rate_ref = (ref.history.relres[-1] / ref.history.relres[0]) ** (1.0 / ref.iterations)
        assert rate_dr <= rate_ref * 1.25

    def test_flexible_and_fixed_identical_for_same_action(self, rng):
        a = clustered_nonnormal_operator(60, 3)
        b = crandn(rng, 60)
        d = 1.0 + np.arange(60) / 60.0
        fixed = PreconditionerHandle(lambda v: v / d, flexible=False)
        flexible = PreconditionerHandle(lambda v: v / d, flexible=True)
        cfg = SolveConfig(restart=12, tol=1e-9, max_cycles=60, augment=3)
        r1 = gmres_dr_solve(a, b, cfg, m=fixed)
        r2 = gmres_dr_solve(a, b, cfg, m=flexible)
        assert r1.history.relres == pytest.approx(r2.history.relres, rel=1e-10)

    def test_exact_eigendirections_never_increase_at_restart(self, rng):
        lam = np.concatenate([[0.01, 0.02, 0.05], rng.uniform(1.0, 2.0, 57)])
        spec = SpectrumSpec(tuple(lam), hermitian=False, mixing_seed=8)
        model = build_spectrum(spec)
        a = operator_from_dense(model.matrix, hermitian=False)
        b = crandn(rng, 60)
        zk = model.right_vectors[:, np.argsort(np.abs(lam))[:3]]
        images = np.column_stack([a.apply(zk[:, i]) for i in range(3)])
        qn, rn = np.linalg.qr(np.column_stack([images, b]))
        warm = RecycleSpace(zk, qn, rn[:, :3], np.zeros(3, complex))
        cfg = SolveConfig(restart=12, tol=1e-10, max_cycles=60, augment=3)
        report = gmres_dr_solve(a, b, cfg, recycle=warm)
        assert report.converged
        for mark in report.history.cycle_marks:
            if mark + 1 < len(report.history.relres):
                assert report.history.relres[mark + 1] <= report.history.relres[mark] * (1 + 1e-10)

    def test_harvest_satisfies_invariants(self, rng):
        a = clustered_nonnormal_operator(50, 17)
        b = crandn(rng, 50)
        cfg = SolveConfig(restart=12, tol=1e-8, max_cycles=100, augment=4)
        report = gmres_dr_solve(a, b, cfg)
        assert report.converged
        assert report.recycle is not None
        rel, orth = recycle_defects(report.recycle, a)
        scale = np.linalg.norm(a.dense) * max(np.linalg.norm(report.recycle.Zk), 1.0)
        assert rel <= 1e-10 * scale
        assert orth <= 1e-11


class TestSerialization:
    def test_roundtrip(self, tmp_path, rng):
        a = clustered_nonnormal_operator(40, 5)
        b = crandn(rng, 40)
        report = gmres_dr_solve(a, b, SolveConfig(restart=10, tol=1e-8, max_cycles=60, augment=3))
        space = report.recycle
        path = tmp_path / "space.bin"
        save_recycle_space(path, space)
        loaded = load_recycle_space(path)
        assert loaded.Zk == pytest.approx(space.Zk)
        assert loaded.Vk1 == pytest.approx(space.Vk1)
        assert loaded.Hk == pytest.approx(space.Hk)
        assert loaded.theta == pytest.approx(space.theta)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"whatever")
        with pytest.raises(InvalidInputError):
            load_recycle_space(path)
