import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oacal.errors import (
    DimMismatch,
    EmptyAccumulator,
    EmptyInput,
    NegativeAlpha,
)
from oacal.hessian import (
    HessianAccumulator,
    HessianMode,
    LogisticModel,
    Reduction,
    accumulate_adaptive,
    accumulate_agnostic,
    accumulate_agnostic_batch,
    aggregate_row_hessians,
    finalize,
    fisher_expected_outer,
    fisher_sampled_outer,
    logistic_exact_hessian,
    logistic_gradient,
    logistic_loss,
    merge,
    regularize,
    row_hessians,
    sigmoid,
)
from oacal.linalg import cholesky, symmetrize


class TestAccumulators:
    def test_single_outer_product(self):
        acc = HessianAccumulator(2, HessianMode.AGNOSTIC)
        accumulate_agnostic(acc, [1.0, 0.0])
        np.testing.assert_allclose(acc.sum, [[1.0, 0.0], [0.0, 0.0]])
        assert acc.n_samples == 1

    def test_doubling(self):
        acc = HessianAccumulator(2, HessianMode.AGNOSTIC)
        accumulate_agnostic(acc, [1.0, 2.0])
        accumulate_agnostic(acc, [1.0, 2.0])
        np.testing.assert_allclose(acc.sum, [[2.0, 4.0], [4.0, 8.0]])

    def test_agnostic_matches_brute_force(self):
        rng = np.random.default_rng(5)
        xs = rng.standard_normal((100, 6))
        acc = HessianAccumulator(6, HessianMode.AGNOSTIC)
        for x in xs:
            accumulate_agnostic(acc, x)
        brute = np.zeros((6, 6))
        for x in xs:
            brute += np.outer(x, x)
        np.testing.assert_allclose(acc.sum, brute, atol=1e-10)

    def test_batch_matches_loop(self):
        rng = np.random.default_rng(15)
        xs = rng.standard_normal((40, 5))
        a = HessianAccumulator(5, HessianMode.AGNOSTIC)
        b = HessianAccumulator(5, HessianMode.AGNOSTIC)
        for x in xs:
            accumulate_agnostic(a, x)
        accumulate_agnostic_batch(b, xs)
        np.testing.assert_allclose(a.sum, b.sum, atol=1e-10)
        assert b.n_samples == 40

    def test_adaptive_rank_one(self):
        acc = HessianAccumulator(2, HessianMode.ADAPTIVE)
        accumulate_adaptive(acc, [[1.0, 2.0]])
        np.testing.assert_allclose(acc.sum, [[1.0, 2.0], [2.0, 4.0]])

    def test_adaptive_orthonormal_rows(self):
        acc = HessianAccumulator(2, HessianMode.ADAPTIVE)
        accumulate_adaptive(acc, np.eye(2))
        np.testing.assert_allclose(acc.sum, np.eye(2))

    def test_adaptive_equals_row_sum(self):
        rng = np.random.default_rng(6)
        g = rng.standard_normal((4, 3))
        acc = HessianAccumulator(3, HessianMode.ADAPTIVE)
        accumulate_adaptive(acc, g)
        by_rows = sum(np.outer(row, row) for row in g)
        np.testing.assert_allclose(acc.sum, by_rows, atol=1e-12)

    def test_mode_and_dim_checks(self):
        acc = HessianAccumulator(2, HessianMode.AGNOSTIC)
        with pytest.raises(DimMismatch):
            accumulate_adaptive(acc, np.eye(2))
        with pytest.raises(DimMismatch):
            accumulate_agnostic(acc, [1.0, 2.0, 3.0])

    def test_merge(self):
        rng = np.random.default_rng(8)
        xs = rng.standard_normal((30, 4))
        whole = HessianAccumulator(4, HessianMode.AGNOSTIC)
        left = HessianAccumulator(4, HessianMode.AGNOSTIC)
        right = HessianAccumulator(4, HessianMode.AGNOSTIC)
        for x in xs:
            accumulate_agnostic(whole, x)
        for x in xs[:13]:
            accumulate_agnostic(left, x)
        for x in xs[13:]:
            accumulate_agnostic(right, x)
        merged = merge(left, right)
        assert merged.n_samples == 30
        np.testing.assert_allclose(merged.sum, whole.sum, atol=1e-10)


class TestFinalize:
    def test_single_sample_sum_equals_mean(self):
        for reduction in (Reduction.SUM, Reduction.MEAN):
            acc = HessianAccumulator(2, HessianMode.AGNOSTIC, reduction)
            accumulate_agnostic(acc, [3.0, -1.0])
            np.testing.assert_allclose(finalize(acc), np.outer([3, -1], [3, -1]))

    def test_two_identical_samples_mean(self):
        acc = HessianAccumulator(2, HessianMode.AGNOSTIC, Reduction.MEAN)
        accumulate_agnostic(acc, [1.0, 2.0])
        accumulate_agnostic(acc, [1.0, 2.0])
        np.testing.assert_allclose(finalize(acc), np.outer([1, 2], [1, 2]))

    def test_sum_is_n_times_mean(self):
        rng = np.random.default_rng(9)
        s = HessianAccumulator(3, HessianMode.AGNOSTIC, Reduction.SUM)
        m = HessianAccumulator(3, HessianMode.AGNOSTIC, Reduction.MEAN)
        for _ in range(16):
            x = rng.standard_normal(3)
            accumulate_agnostic(s, x)
            accumulate_agnostic(m, x)
        np.testing.assert_allclose(finalize(s), 16 * finalize(m), atol=1e-12)

    def test_empty_accumulator(self):
        with pytest.raises(EmptyAccumulator):
            finalize(HessianAccumulator(2, HessianMode.AGNOSTIC))

    def test_psd_after_random_sequences(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            dim = int(rng.integers(1, 9))
            acc = HessianAccumulator(dim, HessianMode.ADAPTIVE)
            for _ in range(int(rng.integers(1, 6))):
                accumulate_adaptive(
                    acc, rng.standard_normal((int(rng.integers(1, 5)), dim))
                )
            eigs = np.linalg.eigvalsh(finalize(acc))
            assert eigs.min() >= -1e-9


class TestRegularize:
    def test_direct_formula(self):
        out = regularize(np.diag([2.0, 4.0]), 0.1)
        np.testing.assert_allclose(out, np.diag([2.3, 4.3]))

    def test_alpha_zero_identity(self):
        h = symmetrize(np.arange(9.0).reshape(3, 3))
        np.testing.assert_array_equal(regularize(h, 0.0), h)

    def test_negative_alpha(self):
        with pytest.raises(NegativeAlpha):
            regularize(np.eye(2), -0.5)

    def test_alpha_one_makes_cholesky_succeed(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            dim = int(rng.integers(2, 10))
            if rng.random() < 0.5:
                a = rng.standard_normal((dim, dim))
                h = symmetrize(a @ a.T)
            else:
                # rank-deficient: fewer factors than dimensions
                a = rng.standard_normal((dim, max(1, dim // 2)))
                h = symmetrize(a @ a.T)
            cholesky(regularize(h, 1.0))

    @given(
        st.integers(min_value=1, max_value=8),
        st.floats(min_value=0.0, max_value=10.0, allow_nan=False),
        st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=60, deadline=None)
    def test_diagonal_shift_only(self, dim, alpha, seed):
        h = symmetrize(np.random.default_rng(seed).standard_normal((dim, dim)))
        out = regularize(h, alpha)
        shift = alpha * np.mean(np.diag(h))
        np.testing.assert_allclose(np.diag(out), np.diag(h) + shift, atol=1e-12)
        off = ~np.eye(dim, dtype=bool)
        np.testing.assert_array_equal(out[off], h[off])


class TestLogisticOracle:
    def test_gradient_at_zero_weights(self):
        m = LogisticModel(np.zeros(2))
        np.testing.assert_allclose(
            logistic_gradient(m, [1.0, 0.0], 1), [-0.5, 0.0]
        )
        np.testing.assert_allclose(
            logistic_gradient(m, [1.0, 0.0], 0), [0.5, 0.0]
        )

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            d = int(rng.integers(1, 8))
            w = rng.standard_normal(d)
            x = rng.standard_normal(d)
            y = int(rng.integers(0, 2))
            grad = logistic_gradient(LogisticModel(w), x, y)
            h = 1e-6
            fd = np.empty(d)
            for k in range(d):
                e = np.zeros(d)
                e[k] = h
                fd[k] = (
                    logistic_loss(LogisticModel(w + e), x, y)
                    - logistic_loss(LogisticModel(w - e), x, y)
                ) / (2 * h)
            np.testing.assert_allclose(grad, fd, atol=1e-6)

    def test_exact_hessian_at_zero_weights(self):
        m = LogisticModel(np.zeros(2))
        np.testing.assert_allclose(
            logistic_exact_hessian(m, [[1.0, 0.0]]), [[0.25, 0.0], [0.0, 0.0]]
        )
        np.testing.assert_allclose(
            logistic_exact_hessian(m, [[0.0, 0.0]]), np.zeros((2, 2))
        )

    def test_exact_hessian_matches_finite_differences(self):
        rng = np.random.default_rng(22)
        d = 4
        w = rng.standard_normal(d) * 0.5
        xs = rng.standard_normal((12, d))
        ys = rng.integers(0, 2, size=12)
        exact = logistic_exact_hessian(LogisticModel(w), xs)

        def mean_loss(wv):
            model = LogisticModel(wv)
            return np.mean(
                [logistic_loss(model, x, int(y)) for x, y in zip(xs, ys)]
            )

        h = 1e-4
        fd = np.empty((d, d))
        for a in range(d):
            for b in range(d):
                ea = np.zeros(d)
                eb = np.zeros(d)
                ea[a] = h
                eb[b] = h
                fd[a, b] = (
                    mean_loss(w + ea + eb)
                    - mean_loss(w + ea - eb)
                    - mean_loss(w - ea + eb)
                    + mean_loss(w - ea - eb)
                ) / (4 * h * h)
        np.testing.assert_allclose(exact, fd, atol=1e-5)

    def test_fisher_identity_exact(self):
        rng = np.random.default_rng(23)
        worst = 0.0
        for _ in range(50):
            d = int(rng.integers(1, 17))
            m = LogisticModel(rng.standard_normal(d))
            xs = rng.standard_normal((int(rng.integers(1, 30)), d))
            diff = np.max(
                np.abs(fisher_expected_outer(m, xs) - logistic_exact_hessian(m, xs))
            )
            worst = max(worst, diff)
        assert worst < 1e-12

    def test_fisher_vanishes_at_saturation(self):
        m = LogisticModel(np.array([50.0]))
        out = fisher_expected_outer(m, [[-10.0]])  # pi ~ 0
        assert np.max(np.abs(out)) < 1e-12

    def test_sampled_fisher_converges(self):
        wins = 0
        for seed in range(20):
            rng = np.random.default_rng(1000 + seed)
            d = 4
            m = LogisticModel(rng.standard_normal(d))
            xs = rng.standard_normal((32, d))
            exact = logistic_exact_hessian(m, xs)
            err_small = np.max(
                np.abs(fisher_sampled_outer(m, xs, 100, rng) - exact)
            )
            err_big = np.max(
                np.abs(fisher_sampled_outer(m, xs, 10_000, rng) - exact)
            )
            wins += err_big < err_small
        assert wins >= 19  # >= 95% of 20 trials

    def test_empty_inputs(self):
        m = LogisticModel(np.zeros(2))
        with pytest.raises(EmptyInput):
            logistic_exact_hessian(m, np.empty((0, 2)))
        with pytest.raises(EmptyInput):
            fisher_expected_outer(m, np.empty((0, 2)))

    def test_sigmoid_stable_extremes(self):
        assert sigmoid(1000.0) == 1.0
        assert sigmoid(-1000.0) == 0.0
        assert sigmoid(0.0) == 0.5


class TestAggregation:
    def test_upper_bound_over_row_hessians(self):
        rng = np.random.default_rng(31)
        for _ in range(100):
            d_row = int(rng.integers(1, 6))
            d_col = int(rng.integers(1, 6))
            blocks = []
            for _ in range(d_row):
                a = rng.standard_normal((d_col, d_col))
                blocks.append(symmetrize(a @ a.T))
            total = aggregate_row_hessians(blocks)
            delta = rng.standard_normal((d_row, d_col))
            lhs = float(np.sum((delta @ total) * delta))
            rhs = sum(
                float(delta[j] @ blocks[j] @ delta[j]) for j in range(d_row)
            )
            assert lhs >= rhs - 1e-9

    def test_gram_equals_row_hessian_sum(self):
        rng = np.random.default_rng(32)
        samples = [rng.standard_normal((5, 4)) for _ in range(7)]
        acc = HessianAccumulator(4, HessianMode.ADAPTIVE, Reduction.MEAN)
        for g in samples:
            accumulate_adaptive(acc, g)
        via_rows = aggregate_row_hessians(row_hessians(samples))
        np.testing.assert_allclose(finalize(acc), via_rows, atol=1e-10)
