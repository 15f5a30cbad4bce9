import numpy as np
import pytest

from capeseg.calibration import (
    assign_p_emp,
    bin_assignment,
    build_bins,
    calibration_loss,
    evaluate_predictions,
)
from capeseg.fieldgen import FieldConfig, generate_dataset
from capeseg.model import sigmoid
from capeseg.numerics import Rng
from capeseg.pipeline import (
    EarlyStopper,
    TrainConfig,
    evaluate_arm,
    kfold_rotation,
    run_experiment,
    run_fold,
    split_kfold,
    train_bce_continue,
    train_cape,
    train_warmup,
)


@pytest.fixture(scope="module")
def small_dataset():
    cfg = FieldConfig(height=16, width=16, length_scale=2.0, target_rate=0.2, obs_noise=0.8, seed=31)
    return generate_dataset(cfg, 36)


def small_config(**overrides):
    base = dict(
        lr=5e-3,
        max_epochs=4,
        patience=2,
        batch_size=8,
        bins=10,
        cal_weight=0.5,
        folds=3,
        cape_epochs_override=3,
        hidden_channels=4,
        seed=17,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestSplitKfold:
    def test_nine_samples_nine_folds(self):
        folds = split_kfold(9, 9, seed=1)
        assert all(len(f) == 1 for f in folds)
        train_idx, val_idx, test_idx = kfold_rotation(folds, 0)
        assert len(train_idx) == 7 and len(val_idx) == 1 and len(test_idx) == 1

    @pytest.mark.parametrize("n,k", [(10, 3), (25, 4), (9, 9), (100, 7)])
    def test_partition_property(self, n, k):
        folds = split_kfold(n, k, seed=n + k)
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 1
        merged = np.concatenate(folds)
        assert sorted(merged.tolist()) == list(range(n))

    def test_rotation_roles_disjoint(self):
        folds = split_kfold(20, 4, seed=2)
        for r in range(4):
            train_idx, val_idx, test_idx = kfold_rotation(folds, r)
            combined = np.concatenate([train_idx, val_idx, test_idx])
            assert sorted(combined.tolist()) == list(range(20))

    def test_same_seed_identical(self):
        a = split_kfold(17, 3, seed=5)
        b = split_kfold(17, 3, seed=5)
        for fa, fb in zip(a, b):
            assert np.array_equal(fa, fb)

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError):
            split_kfold(2, 3, seed=0)


class TestEarlyStopper:
    def test_flat_loss_stops_after_patience(self):
        stopper = EarlyStopper(patience=5)
        stopped_at = None
        for epoch in range(1, 50):
            improved, stop = stopper.update(epoch, 1.0)
            if stop:
                stopped_at = epoch
                break
        assert stopped_at == 6  # 1 + patience
        assert stopper.best_epoch == 1

    def test_strictly_decreasing_never_stops(self):
        stopper = EarlyStopper(patience=3)
        for epoch in range(1, 30):
            improved, stop = stopper.update(epoch, 1.0 / epoch)
            assert improved and not stop
        assert stopper.best_epoch == 29

    def test_min_delta_counts_small_gains_as_no_improvement(self):
        stopper = EarlyStopper(patience=2, min_delta=0.1)
        stopper.update(1, 1.0)
        improved, stop = stopper.update(2, 0.95)  # gain below min_delta
        assert not improved and not stop
        _, stop = stopper.update(3, 0.91)
        assert stop


class TestTrainWarmup:
    def test_best_val_loss_is_minimum_of_records(self, small_dataset):
        folds = split_kfold(len(small_dataset), 3, seed=3)
        train_idx, val_idx, _ = kfold_rotation(folds, 0)
        result = train_warmup(small_dataset, train_idx, val_idx, small_config())
        val_losses = [r.val_loss for r in result.records]
        assert result.best_val_loss == min(val_losses)
        assert result.records[result.best_epoch - 1].val_loss == result.best_val_loss
        assert all(r.phase == "warmup" for r in result.records)
        assert result.stop_epoch == len(result.records)

    def test_deterministic_given_seed(self, small_dataset):
        folds = split_kfold(len(small_dataset), 3, seed=3)
        train_idx, val_idx, _ = kfold_rotation(folds, 0)
        a = train_warmup(small_dataset, train_idx, val_idx, small_config())
        b = train_warmup(small_dataset, train_idx, val_idx, small_config())
        assert np.array_equal(a.best_params.pack(), b.best_params.pack())
        assert [r.val_loss for r in a.records] == [r.val_loss for r in b.records]

    def test_patience_bounds_epochs_after_best(self, small_dataset):
        folds = split_kfold(len(small_dataset), 3, seed=3)
        train_idx, val_idx, _ = kfold_rotation(folds, 0)
        cfg = small_config(max_epochs=30, patience=2, lr=0.5)  # big lr to force noise
        result = train_warmup(small_dataset, train_idx, val_idx, cfg)
        assert result.stop_epoch <= 30
        if result.stop_epoch < 30:
            assert result.stop_epoch == result.best_epoch + cfg.patience


class TestTrainCape:
    def test_records_carry_cape_phase_and_continue_numbering(self, small_dataset):
        folds = split_kfold(len(small_dataset), 3, seed=4)
        train_idx, val_idx, _ = kfold_rotation(folds, 0)
        cfg = small_config()
        warm = train_warmup(small_dataset, train_idx, val_idx, cfg)
        _, records = train_cape(
            warm.best_params, small_dataset, train_idx, val_idx, cfg, warm.stop_epoch
        )
        assert len(records) == 3
        assert all(r.phase == "cape" for r in records)
        assert records[0].epoch == warm.stop_epoch + 1

    def test_zero_weight_bitwise_equals_bce_continuation(self, small_dataset):
        folds = split_kfold(len(small_dataset), 3, seed=4)
        train_idx, val_idx, _ = kfold_rotation(folds, 0)
        cfg = small_config(cal_weight=0.0)
        warm = train_warmup(small_dataset, train_idx, val_idx, cfg)
        cape_params, cape_records = train_cape(
            warm.best_params, small_dataset, train_idx, val_idx, cfg, warm.stop_epoch
        )
        bce_params, bce_records = train_bce_continue(
            warm.best_params, small_dataset, train_idx, val_idx, cfg, warm.stop_epoch
        )
        assert np.array_equal(cape_params.pack(), bce_params.pack())
        assert [r.train_loss for r in cape_records] == [r.train_loss for r in bce_records]
        assert [r.val_loss for r in cape_records] == [r.val_loss for r in bce_records]

    def test_shared_budget_consumed_by_warmup(self, small_dataset):
        folds = split_kfold(len(small_dataset), 3, seed=4)
        train_idx, val_idx, _ = kfold_rotation(folds, 0)
        cfg = small_config(cape_epochs_override=None, cape_epochs=6, max_epochs=4, patience=2)
        warm = train_warmup(small_dataset, train_idx, val_idx, cfg)
        _, records = train_cape(
            warm.best_params, small_dataset, train_idx, val_idx, cfg, warm.stop_epoch
        )
        assert len(records) == 6 - warm.stop_epoch

    def test_single_bin_pulls_mean_prediction_toward_event_rate(self):
        # Bias-only probe: one logit parameter, constant prediction. With a
        # single bin the calibration target is the global event rate, and
        # gradient steps must move the mean prediction toward it monotonically.
        rng = Rng(55)
        outcomes = (rng.uniform(4000) < 0.07).astype(float)
        rate = outcomes.mean()
        theta = 0.0  # prediction starts at 0.5
        gaps = []
        for _ in range(60):
            preds = np.full_like(outcomes, sigmoid(np.array([theta]))[0])
            table = build_bins(preds, outcomes, 1)
            targets = assign_p_emp(bin_assignment(preds, 1), table)
            assert np.allclose(targets, rate)
            _, grad = calibration_loss(preds, targets)
            # chain rule through the shared logit
            dtheta = float(np.sum(grad * preds * (1.0 - preds)))
            gaps.append(abs(preds[0] - rate))
            theta -= 25.0 * dtheta
        assert all(a >= b - 1e-12 for a, b in zip(gaps, gaps[1:]))
        assert gaps[-1] < 0.01


class TestEvaluateArm:
    def test_same_params_identical_report(self, small_dataset):
        params_rng = Rng(6)
        from capeseg.model import init_params

        params = init_params(3, 4, params_rng)
        idx = np.arange(8)
        a = evaluate_arm(params, small_dataset, idx, 10)
        b = evaluate_arm(params, small_dataset, idx, 10)
        assert a.ece == b.ece and a.brier == b.brier and a.kl_true == b.kl_true

    def test_constant_half_predictor_ece(self):
        cfg = FieldConfig(height=32, width=32, target_rate=0.07, seed=77)
        ds = generate_dataset(cfg, 200)
        outs = np.concatenate([s.outcomes.ravel() for s in ds.samples])
        preds = np.full_like(outs, 0.5)
        report = evaluate_predictions(preds, outs, None, 20)
        assert abs(report.ece - 0.43) < 0.01
        assert report.kl_true is None

    def test_oracle_injection_calibrated(self):
        cfg = FieldConfig(height=32, width=32, target_rate=0.14, seed=78)
        ds = generate_dataset(cfg, 400)  # ~4e5 pixels keeps this test quick
        outs = np.concatenate([s.outcomes.ravel() for s in ds.samples])
        true_p = np.concatenate([s.true_p.ravel() for s in ds.samples])
        report = evaluate_predictions(true_p, outs, true_p, 20)
        assert report.ece < 0.01
        assert report.kl_true == 0.0


class TestFoldIsolation:
    def test_perturbing_test_fold_leaves_params_identical(self, small_dataset):
        import copy

        folds = split_kfold(len(small_dataset), 3, seed=9)
        train_idx, val_idx, test_idx = kfold_rotation(folds, 0)
        cfg = small_config(max_epochs=3, patience=1, cape_epochs_override=2)

        def full_run(ds):
            warm = train_warmup(ds, train_idx, val_idx, cfg)
            cape_params, _ = train_cape(
                warm.best_params, ds, train_idx, val_idx, cfg, warm.stop_epoch
            )
            return warm.best_params.pack(), cape_params.pack()

        baseline_warm, baseline_cape = full_run(small_dataset)
        mangled = copy.deepcopy(small_dataset)
        scramble = Rng(1234)
        for i in test_idx:
            mangled.samples[i].inputs[:] = scramble.normal(mangled.samples[i].inputs.shape)
            mangled.samples[i].outcomes[:] = (
                scramble.uniform(mangled.samples[i].outcomes.shape) < 0.5
            ).astype(float)
        mangled_warm, mangled_cape = full_run(mangled)
        assert np.array_equal(baseline_warm, mangled_warm)
        assert np.array_equal(baseline_cape, mangled_cape)


class TestRunExperiment:
    def test_one_cell_structure_and_row_count(self):
        field = FieldConfig(height=16, width=16, length_scale=2.0, target_rate=0.5, seed=0)
        cfg = small_config(max_epochs=3, patience=1, cape_epochs_override=2, seed=99)
        result = run_experiment(field, [0.2], [24], cfg)
        assert len(result.cells) == 1
        cell = result.cells[0]
        assert cell.error is None
        assert len(cell.folds) == 3
        rows = result.rows()
        assert len(rows) == 1 * 3 * 2  # grid x folds x arms
        arms = {r["arm"] for r in rows}
        assert arms == {"bce", "cape"}
        for fold in cell.folds:
            assert fold.warmup_records  # shared by both arms by construction
        agg = cell.aggregate()
        assert "ece" in agg["bce"] and "ece" in agg["cape"]

    def test_one_cell_completes_quickly(self):
        import time

        field = FieldConfig(height=16, width=16, length_scale=2.0, target_rate=0.5, seed=0)
        cfg = small_config(seed=55)
        start = time.monotonic()
        result = run_experiment(field, [0.2], [60], cfg)
        assert time.monotonic() - start < 60.0
        assert result.cells[0].error is None

    def test_failed_cell_recorded_without_aborting(self):
        field = FieldConfig(height=16, width=16, length_scale=2.0, target_rate=0.5, seed=0)
        cfg = small_config(max_epochs=3, patience=1, cape_epochs_override=2, seed=99)
        result = run_experiment(field, [0.2], [2, 24], cfg)  # n=2 < folds -> fails
        assert len(result.cells) == 2
        assert result.cells[0].error is not None
        assert result.cells[1].error is None
        assert len(result.failures) == 1

    def test_rerun_bit_identical(self):
        field = FieldConfig(height=16, width=16, length_scale=2.0, target_rate=0.5, seed=0)
        cfg = small_config(max_epochs=3, patience=1, cape_epochs_override=2, seed=7)
        a = run_experiment(field, [0.3], [24], cfg)
        b = run_experiment(field, [0.3], [24], cfg)
        for ra, rb in zip(a.rows(), b.rows()):
            assert ra == rb

    def test_run_fold_shares_warmup(self, small_dataset):
        folds = split_kfold(len(small_dataset), 3, seed=10)
        cfg = small_config(max_epochs=3, patience=1, cape_epochs_override=2)
        fold = run_fold(small_dataset, folds, 1, cfg)
        assert fold.fold == 1
        assert fold.stop_epoch == len(fold.warmup_records)
        assert fold.cape_records[0].epoch == fold.stop_epoch + 1


class TestTrainConfigValidation:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"patience": 50, "max_epochs": 50},
            {"folds": 2},
            {"bins": 0},
            {"cal_weight": 1.5},
            {"lr": 0.0},
        ],
    )
    def test_bad_config_rejected(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)
