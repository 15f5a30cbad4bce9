import math

import numpy as np
import pytest
from oracles import build_bins_bruteforce

from capeseg.calibration import (
    assign_p_emp,
    bce_loss,
    bin_assignment,
    brier_score,
    build_bins,
    calibration_loss,
    combined_loss,
    ece,
    evaluate_predictions,
    kl_to_true,
)
from capeseg.numerics import Rng


class TestBuildBins:
    def test_worked_example(self):
        table = build_bins([0.1, 0.2, 0.3, 0.4], [0, 0, 1, 1], 2)
        assert table.counts.tolist() == [2, 2]
        assert np.allclose(table.prob_pred, [0.15, 0.35])
        assert np.allclose(table.prob_true, [0.0, 1.0])
        assert table.edges[0] == 0.0 and table.edges[-1] == 1.0
        assert np.isclose(table.edges[1], 0.2)

    def test_all_identical_predictions(self):
        preds = np.full(10, 0.3)
        outs = np.array([1, 0, 0, 0, 1, 0, 0, 0, 0, 1.0])
        table = build_bins(preds, outs, 3)
        assert table.counts.tolist() == [4, 3, 3]  # near-equal despite total ties
        assert np.allclose(table.prob_pred, 0.3)

    def test_matches_bruteforce_on_random_instances(self):
        rng = Rng(77)
        for case in range(50):
            n = 5 + int(rng.uniform() * 200)
            n_bins = 1 + int(rng.uniform() * min(10, n - 1))
            preds = 0.001 + 0.998 * rng.uniform(n)
            if case % 3 == 0:
                # heavy ties: quantize to few distinct values
                preds = np.round(preds * 4) / 4 + 0.1
                preds = np.clip(preds, 0.05, 0.95)
            outs = (rng.uniform(n) < 0.4).astype(float)
            table = build_bins(preds, outs, n_bins)
            counts, prob_pred, prob_true, edges = build_bins_bruteforce(
                preds.tolist(), outs.tolist(), n_bins
            )
            assert table.counts.tolist() == counts
            assert np.max(np.abs(table.prob_pred - prob_pred)) < 1e-12
            assert np.max(np.abs(table.prob_true - prob_true)) < 1e-12
            assert np.max(np.abs(table.edges - edges)) < 1e-12

    def test_bookkeeping_identities(self):
        rng = Rng(5)
        preds = 0.01 + 0.98 * rng.uniform(997)
        outs = (rng.uniform(997) < 0.3).astype(float)
        table = build_bins(preds, outs, 13)
        assert table.counts.sum() == 997
        mean_pred = float(table.counts @ table.prob_pred) / 997
        mean_out = float(table.counts @ table.prob_true) / 997
        assert abs(mean_pred - preds.mean()) < 1e-12
        assert abs(mean_out - outs.mean()) < 1e-12

    def test_near_equal_occupancy_without_ties(self):
        preds = Rng(3).uniform(103) * 0.9 + 0.05
        table = build_bins(preds, np.zeros(103), 20)
        assert table.counts.max() - table.counts.min() <= 1

    def test_too_few_predictions_rejected(self):
        with pytest.raises(ValueError, match="lower the bin count"):
            build_bins([0.5, 0.6], [0, 1], 3)

    def test_out_of_range_predictions_rejected(self):
        with pytest.raises(ValueError, match="strictly inside"):
            build_bins([0.0, 0.5], [0, 1], 1)


class TestAssignPEmp:
    def test_single_bin_gives_global_rate(self):
        preds = np.array([0.2, 0.4, 0.6, 0.8])
        outs = np.array([0, 1, 1, 1.0])
        table = build_bins(preds, outs, 1)
        targets = assign_p_emp(bin_assignment(preds, 1), table)
        assert np.allclose(targets, 0.75)

    def test_worked_example_targets(self):
        preds = np.array([0.1, 0.2, 0.3, 0.4])
        table = build_bins(preds, [0, 0, 1, 1], 2)
        targets = assign_p_emp(bin_assignment(preds, 2), table)
        assert targets.tolist() == [0.0, 0.0, 1.0, 1.0]

    def test_targets_are_frozen_copies(self):
        preds = np.array([0.1, 0.2, 0.3, 0.4])
        table = build_bins(preds, [0, 0, 1, 1], 2)
        targets = assign_p_emp(bin_assignment(preds, 2), table)
        targets[0] = 0.9
        assert table.prob_true[0] == 0.0

    def test_calibrated_predictor_concentration(self):
        # Perfectly calibrated predictions: most per-pixel targets fall
        # within 2/sqrt(N/B) of the prediction itself.
        rng = Rng(11)
        n, n_bins = 100_000, 50
        preds = 0.05 + 0.9 * rng.uniform(n)
        outs = (rng.uniform(n) < preds).astype(float)
        table = build_bins(preds, outs, n_bins)
        targets = assign_p_emp(bin_assignment(preds, n_bins), table)
        bound = 2.0 / math.sqrt(n / n_bins)
        frac_within = np.mean(np.abs(targets - preds) <= bound)
        assert frac_within >= 0.95


class TestMetrics:
    def test_ece_zero_when_calibrated(self):
        preds = np.array([0.2, 0.2, 0.8, 0.8])
        outs = np.array([0, 0, 1, 1.0])
        table = build_bins(preds, outs, 2)
        # prob_true = [0, 1] vs prob_pred = [0.2, 0.8] -> nonzero; use exact match
        table.prob_true = table.prob_pred.copy()
        assert ece(table) == 0.0

    def test_ece_worked_example(self):
        table = build_bins([0.1, 0.2, 0.3, 0.4], [0, 0, 1, 1], 2)
        assert np.isclose(ece(table), 0.40)

    def test_ece_permutation_invariant(self):
        rng = Rng(4)
        preds = 0.01 + 0.98 * rng.uniform(500)
        outs = (rng.uniform(500) < 0.3).astype(float)
        perm = rng.permutation(500)
        a = ece(build_bins(preds, outs, 10))
        b = ece(build_bins(preds[perm], outs[perm], 10))
        assert np.isclose(a, b, rtol=0, atol=1e-15)

    def test_oracle_predictor_small_ece(self):
        rng = Rng(100)
        n = 1_000_000
        preds = 0.02 + 0.96 * rng.uniform(n)
        outs = (rng.uniform(n) < preds).astype(float)
        report = evaluate_predictions(preds, outs, preds, 20)
        assert report.ece < 0.01
        assert report.kl_true == 0.0

    def test_brier_values(self):
        assert brier_score([0.2, 0.8], [0, 1]) == pytest.approx(0.04)
        outs = (Rng(1).uniform(100) < 0.5).astype(float)
        assert brier_score(np.full(100, 0.5), outs) == pytest.approx(0.25)
        assert brier_score([0.0, 1.0], [0, 1]) == 0.0

    def test_brier_oracle_matches_irreducible_term(self):
        rng = Rng(12)
        n = 1_000_000
        p = 0.05 + 0.9 * rng.uniform(n)
        y = (rng.uniform(n) < p).astype(float)
        assert abs(brier_score(p, y) - np.mean(p * (1 - p))) < 0.002

    def test_kl_zero_when_equal(self):
        p = Rng(2).uniform(1000) * 0.9 + 0.05
        assert kl_to_true(p, p) == 0.0

    def test_kl_worked_value(self):
        expected = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
        assert kl_to_true([0.25], [0.5]) == pytest.approx(expected, abs=1e-12)
        assert kl_to_true([0.25], [0.5]) == pytest.approx(0.14384, abs=1e-5)

    def test_kl_nonnegative_random(self):
        rng = Rng(6)
        for _ in range(100):
            n = 1 + int(rng.uniform() * 50)
            f = 0.01 + 0.98 * rng.uniform(n)
            p = 0.01 + 0.98 * rng.uniform(n)
            assert kl_to_true(f, p) >= 0.0

    def test_kl_handles_degenerate_true_p(self):
        assert kl_to_true([0.5], [1.0]) == pytest.approx(math.log(2.0))
        assert kl_to_true([0.5], [0.0]) == pytest.approx(math.log(2.0))

    def test_kl_missing_true_p_raises(self):
        with pytest.raises(ValueError, match="unavailable"):
            kl_to_true([0.5], None)


class TestLosses:
    def test_bce_half_is_ln2(self):
        for outs in ([0, 0, 0], [1, 1, 1], [0, 1, 0]):
            loss, _ = bce_loss(np.full(3, 0.5), outs)
            assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_bce_perfect_prediction_near_zero(self):
        loss, _ = bce_loss([1e-7, 1 - 1e-7], [0, 1])
        assert loss < 1e-6

    def test_bce_gradient_matches_finite_differences(self):
        rng = Rng(8)
        preds = 0.05 + 0.9 * rng.uniform(24)
        outs = (rng.uniform(24) < 0.4).astype(float)
        _, grad = bce_loss(preds, outs)
        h = 1e-7
        for i in range(preds.size):
            up = preds.copy()
            up[i] += h
            down = preds.copy()
            down[i] -= h
            numeric = (bce_loss(up, outs)[0] - bce_loss(down, outs)[0]) / (2 * h)
            assert abs(grad[i] - numeric) / (abs(grad[i]) + abs(numeric)) < 1e-6

    def test_calibration_loss_with_binary_targets_equals_bce(self):
        rng = Rng(9)
        preds = 0.05 + 0.9 * rng.uniform(50)
        outs = (rng.uniform(50) < 0.5).astype(float)
        ld, gd = bce_loss(preds, outs)
        lc, gc = calibration_loss(preds, outs)
        assert abs(ld - lc) < 1e-12
        assert np.max(np.abs(gd - gc)) < 1e-12

    def test_calibration_loss_minimized_at_targets(self):
        targets = np.array([0.2, 0.5, 0.7])
        at_target, grad = calibration_loss(targets, targets)
        entropy = -np.mean(targets * np.log(targets) + (1 - targets) * np.log(1 - targets))
        assert at_target == pytest.approx(entropy, abs=1e-12)
        assert np.max(np.abs(grad)) < 1e-12
        nudged, _ = calibration_loss(targets + 0.05, targets)
        assert nudged > at_target

    def test_calibration_gradient_matches_finite_differences(self):
        rng = Rng(10)
        preds = 0.05 + 0.9 * rng.uniform(16)
        targets = rng.uniform(16)
        _, grad = calibration_loss(preds, targets)
        h = 1e-7
        for i in range(preds.size):
            up = preds.copy()
            up[i] += h
            down = preds.copy()
            down[i] -= h
            numeric = (
                calibration_loss(up, targets)[0] - calibration_loss(down, targets)[0]
            ) / (2 * h)
            assert abs(grad[i] - numeric) / (abs(grad[i]) + abs(numeric)) < 1e-6


class TestCombinedLoss:
    def setup_method(self):
        rng = Rng(13)
        self.preds = 0.05 + 0.9 * rng.uniform(40)
        self.outs = (rng.uniform(40) < 0.5).astype(float)
        self.targets = rng.uniform(40)

    def test_weight_zero_is_bce_bitwise(self):
        a = combined_loss(self.preds, self.outs, self.targets, 0.0)
        b = bce_loss(self.preds, self.outs)
        assert a[0] == b[0]
        assert np.array_equal(a[1], b[1])

    def test_weight_one_is_calibration_bitwise(self):
        a = combined_loss(self.preds, self.outs, self.targets, 1.0)
        b = calibration_loss(self.preds, self.targets)
        assert a[0] == b[0]
        assert np.array_equal(a[1], b[1])

    def test_half_weight_on_worked_example(self):
        preds = np.array([0.1, 0.2, 0.3, 0.4])
        outs = np.array([0, 0, 1, 1.0])
        targets = np.array([0, 0, 1, 1.0])
        ld, _ = bce_loss(preds, outs)
        lc, _ = calibration_loss(preds, targets)
        both, _ = combined_loss(preds, outs, targets, 0.5)
        assert both == pytest.approx(0.5 * (ld + lc), abs=1e-15)

    def test_bad_weight_rejected(self):
        with pytest.raises(ValueError):
            combined_loss(self.preds, self.outs, self.targets, 1.5)
