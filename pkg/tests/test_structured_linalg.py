import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lkgp.structured_linalg import (
    CgConfig,
    DenseCapError,
    KroneckerOperator,
    NumericalBreakdownError,
    ProbeSet,
    ProjectedKroneckerOperator,
    ProjectionMask,
    cg_solve,
    dense_materialize,
    hutchinson_trace_grad,
    kron_mvm,
    kron_root_sample,
    projected_mvm,
    slq_logdet,
)


def random_spd(rng, k, shift=0.1):
    A = rng.normal(size=(k, k))
    return A @ A.T / k + shift * np.eye(k)


# first config observed at t1, t2; second at t1, t2, t3
STAGGERED_MASK = np.array([[True, True, False], [True, True, True]])


class TestKronMvm:
    def test_identity(self):
        op = KroneckerOperator(np.eye(2), np.eye(2))
        np.testing.assert_array_equal(kron_mvm(op, [1.0, 2.0, 3.0, 4.0]), [1, 2, 3, 4])

    def test_config_major_diagonal_scaling(self):
        op = KroneckerOperator(np.diag([2.0, 3.0]), np.eye(2))
        np.testing.assert_array_equal(kron_mvm(op, np.ones(4)), [2, 2, 3, 3])

    def test_matches_dense_kron(self):
        rng = np.random.default_rng(0)
        K1, K2 = random_spd(rng, 3), random_spd(rng, 2)
        v = rng.normal(size=6)
        np.testing.assert_allclose(
            kron_mvm(KroneckerOperator(K1, K2), v), np.kron(K1, K2) @ v, atol=1e-12
        )

    def test_batched_columns(self):
        rng = np.random.default_rng(1)
        K1, K2 = random_spd(rng, 4), random_spd(rng, 3)
        V = rng.normal(size=(12, 5))
        np.testing.assert_allclose(
            kron_mvm(KroneckerOperator(K1, K2), V), np.kron(K1, K2) @ V, atol=1e-12
        )

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            kron_mvm(KroneckerOperator(np.eye(2), np.eye(2)), np.ones(5))

    def test_rejects_asymmetric_factor(self):
        with pytest.raises(ValueError):
            KroneckerOperator(np.array([[1.0, 2.0], [0.0, 1.0]]), np.eye(2))

    def test_no_quadratic_allocation(self):
        rng = np.random.default_rng(2)
        n = m = 64
        op = KroneckerOperator(random_spd(rng, n), random_spd(rng, m))
        v = rng.normal(size=n * m)
        tracemalloc.start()
        try:
            kron_mvm(op, v)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        # (nm)^2 doubles would be 128 MiB; a few length-nm buffers suffice
        assert peak < 8 * (n * m) * 8


class TestProjectedMvm:
    def test_full_mask_equals_kron_mvm(self):
        rng = np.random.default_rng(3)
        kron = KroneckerOperator(random_spd(rng, 3), random_spd(rng, 4))
        op = ProjectedKroneckerOperator(kron, ProjectionMask.full(3, 4))
        v = rng.normal(size=12)
        np.testing.assert_allclose(projected_mvm(op, v), kron_mvm(kron, v), atol=1e-14)

    def test_staggered_mask_matches_dense_submatrix(self):
        rng = np.random.default_rng(4)
        K1, K2 = random_spd(rng, 2), random_spd(rng, 3)
        op = ProjectedKroneckerOperator(KroneckerOperator(K1, K2), ProjectionMask(STAGGERED_MASK), 0.3)
        keep = [0, 1, 3, 4, 5]
        dense = np.kron(K1, K2)[np.ix_(keep, keep)] + 0.3 * np.eye(5)
        v = rng.normal(size=5)
        np.testing.assert_allclose(projected_mvm(op, v), dense @ v, atol=1e-12)

    def test_zero_vector(self):
        rng = np.random.default_rng(5)
        op = ProjectedKroneckerOperator(
            KroneckerOperator(random_spd(rng, 2), random_spd(rng, 3)), ProjectionMask(STAGGERED_MASK), 1.0, 0.1
        )
        np.testing.assert_array_equal(projected_mvm(op, np.zeros(5)), np.zeros(5))

    def test_dimension_mismatch(self):
        op = ProjectedKroneckerOperator(KroneckerOperator(np.eye(2), np.eye(3)), ProjectionMask(STAGGERED_MASK))
        with pytest.raises(ValueError):
            projected_mvm(op, np.ones(6))

    @settings(max_examples=120, deadline=None)
    @given(
        n=st.integers(1, 8), m=st.integers(1, 8), k=st.integers(1, 3),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_oracle_equivalence(self, n, m, k, seed):
        rng = np.random.default_rng(seed)
        mask = rng.random((n, m)) < 0.6
        mask[np.arange(n), rng.integers(0, m, size=n)] = True
        op = ProjectedKroneckerOperator(
            KroneckerOperator(random_spd(rng, n), random_spd(rng, m)),
            ProjectionMask(mask), rng.uniform(0, 1), rng.uniform(0, 1e-3),
        )
        V = rng.normal(size=(op.mask.count, k))
        np.testing.assert_allclose(projected_mvm(op, V), dense_materialize(op) @ V, rtol=0, atol=1e-12)


class TestMask:
    def test_rejects_empty_config_row(self):
        with pytest.raises(ValueError):
            ProjectionMask(np.array([[True, False], [False, False]]))

    def test_flat_index_is_config_major(self):
        mask = ProjectionMask(STAGGERED_MASK)
        np.testing.assert_array_equal(mask.index, [0, 1, 3, 4, 5])
        np.testing.assert_array_equal(mask.rows, [0, 0, 1, 1, 1])
        np.testing.assert_array_equal(mask.cols, [0, 1, 0, 1, 2])
        assert mask.count == 5


class TestDenseMaterialize:
    def test_full_mask(self):
        K1 = np.array([[1.0, 0.5], [0.5, 1.0]])
        K2 = np.array([[2.0, 0.3], [0.3, 1.0]])
        op = ProjectedKroneckerOperator(KroneckerOperator(K1, K2), ProjectionMask.full(2, 2), 0.1)
        np.testing.assert_allclose(dense_materialize(op), np.kron(K1, K2) + 0.1 * np.eye(4), atol=1e-15)

    def test_staggered_submatrix(self):
        rng = np.random.default_rng(6)
        K1, K2 = random_spd(rng, 2), random_spd(rng, 3)
        op = ProjectedKroneckerOperator(KroneckerOperator(K1, K2), ProjectionMask(STAGGERED_MASK))
        keep = [0, 1, 3, 4, 5]
        np.testing.assert_allclose(dense_materialize(op), np.kron(K1, K2)[np.ix_(keep, keep)], atol=1e-15)

    def test_cap_refusal(self):
        op = ProjectedKroneckerOperator(KroneckerOperator(np.eye(3), np.eye(3)), ProjectionMask.full(3, 3))
        dense_materialize(op, cap=9)
        with pytest.raises(DenseCapError):
            dense_materialize(op, cap=8)


class TestCg:
    def test_identity_one_iteration(self):
        x, report = cg_solve(np.eye(3), np.array([3.0, -1.0, 4.0]))
        np.testing.assert_allclose(x, [3, -1, 4])
        assert report.iterations.tolist() == [1]
        assert report.converged.all()

    def test_diagonal(self):
        x, _ = cg_solve(np.diag([2.0, 4.0]), np.array([2.0, 8.0]), CgConfig(1e-12))
        np.testing.assert_allclose(x, [1.0, 2.0], rtol=1e-12)

    def test_matches_dense_solve(self):
        rng = np.random.default_rng(7)
        A = random_spd(rng, 20)
        b = rng.normal(size=20)
        x, report = cg_solve(A, b, CgConfig(1e-10))
        expected = np.linalg.solve(A, b)
        assert np.linalg.norm(x - expected) <= 1e-8 * np.linalg.norm(expected)
        assert report.all_converged

    def test_batched_residual_contract(self):
        rng = np.random.default_rng(8)
        A = random_spd(rng, 30, shift=0.01)
        B = rng.normal(size=(30, 6))
        B[:, 2] = 0.0
        cfg = CgConfig(1e-3)
        X, report = cg_solve(A, B, cfg)
        rel = np.linalg.norm(A @ X - B, axis=0) / np.where(np.linalg.norm(B, axis=0) > 0, np.linalg.norm(B, axis=0), 1)
        assert np.all(rel[report.converged] <= cfg.rel_tolerance)
        np.testing.assert_array_equal(X[:, 2], 0.0)
        np.testing.assert_array_equal(report.converged, report.final_rel_residual <= cfg.rel_tolerance)

    def test_nonconvergence_reported(self):
        rng = np.random.default_rng(9)
        A = random_spd(rng, 40, shift=1e-4)
        _, report = cg_solve(A, rng.normal(size=40), CgConfig(1e-12, max_iters=2))
        assert not report.all_converged
        assert report.iterations[0] == 2

    def test_nan_aborts(self):
        with pytest.raises(NumericalBreakdownError):
            cg_solve(np.array([[np.nan, 0.0], [0.0, 1.0]]), np.array([1.0, 1.0]))

    def test_deterministic(self):
        rng = np.random.default_rng(10)
        A, B = random_spd(rng, 15), rng.normal(size=(15, 3))
        x1, _ = cg_solve(A, B)
        x2, _ = cg_solve(A, B)
        np.testing.assert_array_equal(x1, x2)

    def test_projected_operator(self):
        rng = np.random.default_rng(11)
        op = ProjectedKroneckerOperator(
            KroneckerOperator(random_spd(rng, 4), random_spd(rng, 5)),
            ProjectionMask((rng.random((4, 5)) < 0.7) | np.eye(4, 5, dtype=bool)), 0.05,
        )
        b = rng.normal(size=op.mask.count)
        x, _ = cg_solve(op, b, CgConfig(1e-11))
        np.testing.assert_allclose(x, np.linalg.solve(dense_materialize(op), b), rtol=1e-8)


class TestSlq:
    def _identity_op(self, c=1.0, n=2, m=5):
        return ProjectedKroneckerOperator(
            KroneckerOperator(np.eye(n), c * np.eye(m)), ProjectionMask.full(n, m)
        )

    def test_identity(self):
        op = self._identity_op()
        assert abs(slq_logdet(op, ProbeSet(10, 8, 0))) <= 1e-10

    def test_scaled_identity(self):
        op = self._identity_op(c=3.5)
        assert slq_logdet(op, ProbeSet(10, 4, 1)) == pytest.approx(10 * np.log(3.5), abs=1e-10)

    def test_matches_dense_logdet(self):
        rng = np.random.default_rng(12)
        for trial in range(3):
            n, m = 16, 16
            mask = rng.random((n, m)) < 0.8
            mask[:, 0] = True
            op = ProjectedKroneckerOperator(
                KroneckerOperator(random_spd(rng, n), random_spd(rng, m)), ProjectionMask(mask), 1.0
            )
            # noise >= 1 keeps every log-eigenvalue positive; no cancellation in the relative check
            _, expected = np.linalg.slogdet(dense_materialize(op))
            est = slq_logdet(op, ProbeSet(op.mask.count, 32, trial), 30)
            assert abs(est - expected) <= 0.05 * abs(expected)

    def test_deterministic_in_seed(self):
        rng = np.random.default_rng(13)
        op = ProjectedKroneckerOperator(
            KroneckerOperator(random_spd(rng, 4), random_spd(rng, 4)), ProjectionMask.full(4, 4), 0.1
        )
        assert slq_logdet(op, ProbeSet(16, 8, 5)) == slq_logdet(op, ProbeSet(16, 8, 5))

    def test_rejects_too_few_steps(self):
        with pytest.raises(ValueError):
            slq_logdet(self._identity_op(), ProbeSet(10), lanczos_steps=1)

    def test_indefinite_operator_breaks_down(self):
        A = np.diag([1.0, -2.0, 3.0])
        with pytest.raises(NumericalBreakdownError, match="step"):
            slq_logdet(A, ProbeSet(3, 2, 0), 3)


class TestHutchinson:
    def test_identity_pair_exact(self):
        est, _ = hutchinson_trace_grad(np.eye(7), np.eye(7), ProbeSet(7, 3, 0))
        assert est == pytest.approx(7.0, abs=1e-12)

    def test_diagonal_exact_for_rademacher(self):
        d = np.array([1.0, -2.0, 0.5, 4.0])
        est, _ = hutchinson_trace_grad(np.eye(4), np.diag(d), ProbeSet(4, 5, 3))
        assert est == pytest.approx(d.sum(), abs=1e-12)

    def test_matches_dense_trace(self):
        rng = np.random.default_rng(14)
        A = random_spd(rng, 40, shift=0.5)
        D = random_spd(rng, 40)
        expected = np.trace(np.linalg.solve(A, D))
        est, report = hutchinson_trace_grad(A, D, ProbeSet(40, 64, 1), CgConfig(1e-10))
        assert report.all_converged
        assert abs(est - expected) <= 0.1 * abs(expected)

    def test_probes_are_rademacher_and_reproducible(self):
        Z = ProbeSet(50, 6, 9).probes
        assert set(np.unique(Z)) <= {-1.0, 1.0}
        np.testing.assert_array_equal(Z, ProbeSet(50, 6, 9).probes)


class TestKronRootSample:
    def test_identity(self):
        eps = np.arange(6.0)
        np.testing.assert_allclose(kron_root_sample(np.eye(2), np.eye(3), eps), eps, atol=1e-14)

    def test_zero(self):
        rng = np.random.default_rng(15)
        out = kron_root_sample(random_spd(rng, 2), random_spd(rng, 3), np.zeros(6))
        np.testing.assert_array_equal(out, 0.0)

    def test_empirical_covariance(self):
        rng = np.random.default_rng(16)
        K1 = np.array([[1.0, 0.6], [0.6, 1.5]])
        K2 = np.array([[2.0, -0.4], [-0.4, 0.7]])
        N = 100_000
        draws = kron_root_sample(K1, K2, rng.standard_normal((N, 4)))
        target = np.kron(K1, K2)
        prods = draws[:, :, None] * draws[:, None, :]
        emp = prods.mean(axis=0)
        se = prods.std(axis=0) / np.sqrt(N)
        assert np.all(np.abs(emp - target) <= 5 * se)

    def test_psd_singular_factor(self):
        K1 = np.ones((2, 2))  # duplicated config
        out = kron_root_sample(K1, np.eye(2), np.random.default_rng(0).standard_normal(4))
        np.testing.assert_allclose(out[:2], out[2:], atol=1e-12)

    def test_bit_reproducible(self):
        rng = np.random.default_rng(17)
        K1, K2 = random_spd(rng, 5), random_spd(rng, 4)
        a = kron_root_sample(K1, K2, np.random.default_rng(3).standard_normal(20))
        b = kron_root_sample(K1, K2, np.random.default_rng(3).standard_normal(20))
        assert a.tobytes() == b.tobytes()
