import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oacal.errors import EmptyGroup
from oacal.quant import (
    SCALE_FLOOR,
    AffineParams,
    affine_bit_account,
    binarize_region,
    binary_bit_account,
    double_quantize_stats,
    fit_affine,
    quantize_dequantize,
    residual_binarize,
    round_half_away,
    rtn_quantize,
    splitting_search,
)


def test_round_half_away():
    np.testing.assert_array_equal(
        round_half_away([0.5, 1.5, -0.5, -1.5, 2.4, -2.6]),
        [1.0, 2.0, -1.0, -2.0, 2.0, -3.0],
    )


class TestFitAffine:
    def test_exactly_representable(self):
        p = fit_affine([0.0, 1.0, 2.0, 3.0], bits=2)
        assert p.scale == 1.0
        assert p.zero == 0.0

    def test_constant_group(self):
        p = fit_affine([5.0, 5.0, 5.0], bits=2)
        assert p.scale == SCALE_FLOOR
        assert p.zero == 0.0
        _, deq = quantize_dequantize(np.array([5.0, 5.0]), p, bits=2)
        np.testing.assert_array_equal(deq, [5.0, 5.0])

    def test_symmetric_group_hand_evaluated(self):
        # scale (3 - -3)/3 = 2; zero round(3/2) = 2 with half away from zero
        p = fit_affine([-3.0, 0.0, 3.0], bits=2)
        assert p.scale == 2.0
        assert p.zero == 2.0

    def test_empty_group(self):
        with pytest.raises(EmptyGroup):
            fit_affine([], bits=2)


class TestQuantizeDequantize:
    def test_zero_point_exact(self):
        p = AffineParams(scale=2.0, zero=2.0, min_val=-3.0)
        code, deq = quantize_dequantize(0.0, p, bits=2)
        assert code == 2
        assert deq == 0.0

    def test_clamp_top_of_range(self):
        p = fit_affine([-3.0, 0.0, 3.0], bits=2)
        code, deq = quantize_dequantize(3.0, p, bits=2)
        assert code == 3  # round gives 4, clamped into range
        assert deq == 2.0

    def test_error_bound_random_groups(self):
        rng = np.random.default_rng(40)
        for _ in range(200):
            bits = int(rng.integers(1, 9))
            n = int(rng.integers(2, 40))
            vals = rng.standard_normal(n) * float(rng.uniform(0.01, 100))
            p = fit_affine(vals, bits)
            _, deq = quantize_dequantize(vals, p, bits)
            assert np.max(np.abs(vals - deq)) <= p.scale / 2 + 1e-9

    def test_group_min_error_bound(self):
        rng = np.random.default_rng(41)
        for _ in range(100):
            vals = np.sort(rng.standard_normal(8))
            p = fit_affine(vals, bits=3)
            _, deq = quantize_dequantize(vals[0], p, bits=3)
            assert abs(vals[0] - deq) <= p.scale / 2 + 1e-9

    @given(
        st.integers(min_value=1, max_value=8),
        st.lists(
            st.floats(
                min_value=-1e4,
                max_value=1e4,
                allow_nan=False,
                allow_infinity=False,
                width=32,
            ),
            min_size=1,
            max_size=32,
        ),
    )
    @settings(max_examples=120, deadline=None)
    def test_bound_holds_for_arbitrary_groups(self, bits, raw):
        # includes one-sided groups: the fitted range is widened to zero
        vals = np.asarray(raw, dtype=np.float64)
        p = fit_affine(vals, bits)
        _, deq = quantize_dequantize(vals, p, bits)
        assert np.max(np.abs(vals - deq)) <= p.scale / 2 + 1e-9


class TestRtnQuantize:
    def test_identity_within_half_scale(self):
        layer = rtn_quantize(np.eye(2), bits=2, group_size=2)
        err = np.abs(np.eye(2) - layer.dequantize())
        bound = layer.scales[:, 0][:, None] / 2 + 1e-9
        assert np.all(err <= bound)

    def test_exact_round_trip_on_grid(self):
        # values already on each group's 4-level grid reproduce exactly
        base = np.array([[0.0, 1.0, 2.0, 3.0], [-1.0, 0.0, 1.0, 2.0]])
        layer = rtn_quantize(base, bits=2, group_size=4)
        np.testing.assert_allclose(layer.dequantize(), base, atol=1e-12)

    def test_per_entry_bound_random(self):
        rng = np.random.default_rng(42)
        w = rng.standard_normal((8, 8))
        layer = rtn_quantize(w, bits=2, group_size=4)
        deq = layer.dequantize()
        for r in range(8):
            for c in range(8):
                s = layer.scales[r, c // 4]
                assert abs(w[r, c] - deq[r, c]) <= s / 2 + 1e-9

    def test_ragged_last_group(self):
        w = np.random.default_rng(43).standard_normal((3, 10))
        layer = rtn_quantize(w, bits=3, group_size=4)
        assert layer.scales.shape == (3, 3)  # groups of 4, 4, 2
        deq = layer.dequantize()
        assert deq.shape == w.shape

    def test_codes_in_range(self):
        w = np.random.default_rng(44).standard_normal((6, 12)) * 10
        layer = rtn_quantize(w, bits=2, group_size=3)
        assert layer.codes.min() >= 0
        assert layer.codes.max() <= 3

    def test_accounting_rtn(self):
        layer = rtn_quantize(np.zeros((4, 8)), bits=2, group_size=4)
        # 2 code bits plus two fp16 stats per 4-weight group
        assert layer.accounting.avg_bits_per_weight == 2 + 32 / 4


class TestDoubleQuantizeStats:
    def test_constant_scales_exact(self):
        groups = [AffineParams(0.5, 1.0, -0.5) for _ in range(8)]
        record, new = double_quantize_stats(groups, stat_bits=3, stat_group=4)
        for p in new:
            assert p.scale == 0.5
            assert p.zero == 1.0

    def test_stat_error_bound(self):
        rng = np.random.default_rng(45)
        scales = rng.uniform(0.1, 2.0, size=16)
        groups = [AffineParams(float(s), 1.0, 0.0) for s in scales]
        record, new = double_quantize_stats(groups, stat_bits=8, stat_group=16)
        new_scales = np.array([p.scale for p in new])
        stat_range = scales.max() - scales.min()
        assert np.max(np.abs(new_scales - scales)) < 0.01 * stat_range

    def test_spqr_style_accounting_terms(self):
        account = affine_bit_account(
            64, 64, bits=2, group_size=64, n_outliers=0, stat_bits=3, stat_group=16
        )
        expected = 2 + (3 + 3) / 64 + (2 * 32) / (64 * 16)
        assert account.avg_bits_per_weight == expected

    def test_accounting_with_outliers_consistent(self):
        account = affine_bit_account(
            16, 32, bits=2, group_size=16, n_outliers=5, stat_bits=3, stat_group=16
        )
        n = 16 * 32
        recomputed = (
            account.weight_bits + account.stats_bits + account.outlier_bits
        ) / n
        assert account.avg_bits_per_weight == pytest.approx(recomputed, abs=0)

    def test_dequantized_scales_stay_positive(self):
        groups = [AffineParams(s, 0.0, 0.0) for s in [1e-9, 1.0, 2.0, 3.0]]
        _, new = double_quantize_stats(groups, stat_bits=2, stat_group=4)
        assert all(p.scale > 0 for p in new)


class TestBinaryOps:
    def test_symmetric_pair_exact(self):
        alpha, signs = binarize_region([2.0, -2.0])
        assert alpha == 2.0
        np.testing.assert_array_equal(signs, [1.0, -1.0])

    def test_zero_region(self):
        alpha, signs = binarize_region([0.0, 0.0])
        assert alpha == 0.0
        np.testing.assert_array_equal(signs, [1.0, 1.0])  # sign(0) = +1

    def test_alpha_beats_scan(self):
        vals = np.array([1.0, 3.0])
        alpha, signs = binarize_region(vals)
        assert alpha == 2.0
        err = np.sum((vals - alpha * signs) ** 2)
        assert err == pytest.approx(2.0)
        for a in np.linspace(0.0, 4.0, 4001):
            assert err <= np.sum((vals - a * signs) ** 2) + 1e-12

    def test_residual_binarize_exact_cases(self):
        a1, s1, a2, s2 = residual_binarize([2.0, -2.0])
        assert a1 == 2.0
        assert a2 == 0.0
        a1, s1, a2, s2 = residual_binarize([1.0, 3.0])
        assert (a1, a2) == (2.0, 1.0)
        np.testing.assert_array_equal(a1 * s1 + a2 * s2, [1.0, 3.0])

    def test_two_planes_never_worse(self):
        rng = np.random.default_rng(46)
        for _ in range(200):
            v = rng.standard_normal(int(rng.integers(1, 40)))
            a1, s1, a2, s2 = residual_binarize(v)
            one = np.sum((v - a1 * s1) ** 2)
            two = np.sum((v - a1 * s1 - a2 * s2) ** 2)
            assert two <= one + 1e-12

    def test_empty_inputs(self):
        with pytest.raises(EmptyGroup):
            binarize_region([])
        with pytest.raises(EmptyGroup):
            splitting_search([])


class TestSplittingSearch:
    @staticmethod
    def split_error(mags, t):
        low = mags[mags <= t]
        high = mags[mags > t]
        err = 0.0
        if low.size:
            err += np.sum((low - low.mean()) ** 2)
        if high.size:
            err += np.sum((high - high.mean()) ** 2)
        return err

    def test_perfectly_separable(self):
        vals = np.array([0.1, -0.1] * 8 + [1.0, -1.0] * 8)
        t = splitting_search(vals)
        assert 0.1 <= t < 1.0
        assert self.split_error(np.abs(vals), t) == pytest.approx(0.0, abs=1e-15)

    def test_constant_magnitude_degenerate(self):
        t = splitting_search([0.5, -0.5, 0.5])
        assert t == 0.5

    def test_matches_fine_grid_oracle(self):
        rng = np.random.default_rng(47)
        for _ in range(20):
            vals = rng.standard_normal(256)
            mags = np.abs(vals)
            t64 = splitting_search(vals)
            grid = np.quantile(mags, np.linspace(0.0, 1.0, 1024))
            best_fine = min(self.split_error(mags, t) for t in np.unique(grid))
            got = self.split_error(mags, t64)
            assert got <= best_fine * 1.05 + 1e-12


def test_binary_accounting_lands_near_one_bit():
    account = binary_bit_account(64, 64, n_salient_cols=5)
    assert 1.05 <= account.avg_bits_per_weight <= 1.15
    account = binary_bit_account(256, 64, n_salient_cols=5)
    assert 1.05 <= account.avg_bits_per_weight <= 1.15
