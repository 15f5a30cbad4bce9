"""Two-phase training protocol and experiment sweeps.

Phase one trains on binary cross-entropy with early stopping and keeps
the checkpoint with the best validation loss. Phase two resumes from
that checkpoint and trains on a weighted sum of the cross-entropy loss
and a calibration loss whose per-pixel targets are quantile-binned
empirical frequencies, refreshed once per epoch over the full training
set and frozen in between. Experiments compare the frozen warm-up
checkpoint ("bce" arm) against the continued model ("cape" arm) on held
out test folds.
"""

from __future__ import annotations

import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .calibration import (
    MetricsReport,
    assign_p_emp,
    bce_loss,
    bin_assignment,
    brier_score,
    build_bins,
    combined_loss,
    evaluate_predictions,
    kl_to_true,
)
from .fieldgen import Dataset, FieldConfig, generate_dataset
from .model import ModelParams, backward, forward, init_params, predict
from .numerics import AdamState, NumericError, Rng, adam_step, derive_seed

# Sub-stream keys under the training seed.
_STREAM_INIT = 0
_STREAM_WARMUP_BATCHES = 1
_STREAM_CONTINUE_BATCHES = 2

# Sub-stream keys under the sweep master seed.
_SWEEP_DATA = 10
_SWEEP_SPLIT = 11
_SWEEP_TRAIN = 12

WARMUP_PHASE = "warmup"
CAPE_PHASE = "cape"
ARM_BCE = "bce"
ARM_CAPE = "cape"


@dataclass
class TrainConfig:
    lr: float = 1e-4
    max_epochs: int = 50
    patience: int = 15
    min_delta: float = 0.0
    batch_size: int = 16
    bins: int = 20
    cal_weight: float = 0.5  # weight on the calibration loss term
    folds: int = 9
    cape_epochs: int = 50  # total epoch budget shared with the warm-up
    cape_epochs_override: Optional[int] = None  # explicit phase-two epoch count
    hidden_channels: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if self.folds < 3:
            raise ValueError("need at least 3 folds (train/val/test roles)")
        if self.bins < 1:
            raise ValueError("bins must be >= 1")
        if not 0.0 <= self.cal_weight <= 1.0:
            raise ValueError("cal_weight must be in [0, 1]")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")


@dataclass
class EpochRecord:
    epoch: int
    phase: str  # "warmup" or "cape"
    train_loss: float
    val_loss: float
    brier: float
    kl_true: Optional[float]


@dataclass
class EarlyStopper:
    """Tracks the best validation loss; stops after `patience` epochs without
    an improvement greater than `min_delta`."""

    patience: int
    min_delta: float = 0.0
    best: float = math.inf
    best_epoch: int = 0
    bad_epochs: int = 0

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


@dataclass
class WarmupResult:
    best_params: ModelParams
    best_val_loss: float
    best_epoch: int
    stop_epoch: int
    records: list[EpochRecord]


def split_kfold(n_samples: int, k: int, seed: int) -> list[np.ndarray]:
    """Random partition into k folds whose sizes differ by at most one."""
    if k < 3:
        raise ValueError("need at least 3 folds")
    if n_samples < k:
        raise ValueError(f"cannot split {n_samples} samples into {k} folds")
    perm = Rng(seed).permutation(n_samples)
    return np.array_split(perm, k)


def kfold_rotation(
    folds: list[np.ndarray], rotation: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Role assignment for one rotation: fold r tests, fold r+1 validates, rest train."""
    k = len(folds)
    r = rotation % k
    test_idx = folds[r]
    val_idx = folds[(r + 1) % k]
    train_idx = np.concatenate(
        [folds[i] for i in range(k) if i != r and i != (r + 1) % k]
    )
    return train_idx, val_idx, test_idx


def _split_outcomes(dataset: Dataset, idx: np.ndarray) -> np.ndarray:
    return np.concatenate([dataset.samples[i].outcomes.ravel() for i in idx])


def _split_true_p(dataset: Dataset, idx: np.ndarray) -> Optional[np.ndarray]:
    if not dataset.has_true_p:
        return None
    return np.concatenate([dataset.samples[i].true_p.ravel() for i in idx])


def _predict_split(params: ModelParams, dataset: Dataset, idx: np.ndarray) -> np.ndarray:
    return np.concatenate([predict(params, dataset.samples[i].inputs).ravel() for i in idx])


def _check_block_gradients(template: ModelParams, flat_grads: np.ndarray) -> None:
    if np.isfinite(flat_grads).all():
        return
    for name, sl in template.block_slices().items():
        if not np.isfinite(flat_grads[sl]).all():
            raise NumericError(f"non-finite gradient in parameter block {name}")


def _val_metrics(
    params: ModelParams, dataset: Dataset, val_idx: np.ndarray
) -> tuple[float, float, Optional[float]]:
    preds = _predict_split(params, dataset, val_idx)
    outs = _split_outcomes(dataset, val_idx)
    true_p = _split_true_p(dataset, val_idx)
    val_loss, _ = bce_loss(preds, outs)
    kl = kl_to_true(preds, true_p) if true_p is not None else None
    return val_loss, brier_score(preds, outs), kl


def _run_epoch(
    flat: np.ndarray,
    template: ModelParams,
    adam: AdamState,
    dataset: Dataset,
    order: np.ndarray,
    batch_size: int,
    sample_loss: Callable[[int, np.ndarray], tuple[float, np.ndarray]],
) -> tuple[np.ndarray, AdamState, float]:
    """One pass of minibatch Adam; returns (params, state, mean train loss).

    sample_loss(sample_index, flat_probs) must return a mean-over-pixels
    loss and its per-pixel gradient. Gradients are summed in fixed sample
    order so results do not depend on scheduling.
    """
    epoch_loss = 0.0
    params = template.unpack(flat)
    for start in range(0, len(order), batch_size):
        batch = order[start : start + batch_size]
        scale = 1.0 / len(batch)
        batch_loss = 0.0
        grads = np.zeros_like(flat)
        for si in batch:
            sample = dataset.samples[si]
            probs, cache = forward(params, sample.inputs)
            loss, grad = sample_loss(int(si), probs.ravel())
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss on sample {int(si)}")
            batch_loss += scale * loss
            g = backward(params, cache, grad.reshape(probs.shape) * scale)
            grads += g.pack()
        _check_block_gradients(params, grads)
        flat, adam = adam_step(flat, grads, adam, label="model parameters")
        params = template.unpack(flat)
        epoch_loss += batch_loss * (len(batch) / len(order))
    return flat, adam, epoch_loss


def train_warmup(
    dataset: Dataset, train_idx: np.ndarray, val_idx: np.ndarray, config: TrainConfig
) -> WarmupResult:
    """Minibatch Adam on binary cross-entropy with early stopping.

    Returns the checkpoint with the lowest validation loss (not the last
    one), the epoch it was reached, the epoch training stopped, and the
    per-epoch records.
    """
    rng = Rng(config.seed)
    channels = dataset.shape[0]
    params = init_params(channels, config.hidden_channels, rng.child(_STREAM_INIT))
    flat = params.pack()
    adam = AdamState.init(flat.size, lr=config.lr)
    shuffle_rng = rng.child(_STREAM_WARMUP_BATCHES)
    stopper = EarlyStopper(patience=config.patience, min_delta=config.min_delta)

    train_idx = np.asarray(train_idx)
    best_flat = flat.copy()
    records: list[EpochRecord] = []
    stop_epoch = 0

    def loss_on(si: int, probs: np.ndarray):
        return bce_loss(probs, dataset.samples[si].outcomes.ravel())

    for epoch in range(1, config.max_epochs + 1):
        order = train_idx[shuffle_rng.permutation(len(train_idx))]
        flat, adam, train_loss = _run_epoch(
            flat, params, adam, dataset, order, config.batch_size, loss_on
        )
        val_loss, val_brier, val_kl = _val_metrics(params.unpack(flat), dataset, val_idx)
        records.append(
            EpochRecord(epoch, WARMUP_PHASE, train_loss, val_loss, val_brier, val_kl)
        )
        improved, stop = stopper.update(epoch, val_loss)
        if improved:
            best_flat = flat.copy()
        stop_epoch = epoch
        if stop:
            break

    return WarmupResult(
        best_params=params.unpack(best_flat),
        best_val_loss=stopper.best,
        best_epoch=stopper.best_epoch,
        stop_epoch=stop_epoch,
        records=records,
    )


def _continuation_epochs(config: TrainConfig, start_epoch: int) -> int:
    if config.cape_epochs_override is not None:
        return max(0, config.cape_epochs_override)
    return max(0, config.cape_epochs - start_epoch)


def _continue_training(
    start_params: ModelParams,
    dataset: Dataset,
    train_idx: np.ndarray,
    val_idx: np.ndarray,
    config: TrainConfig,
    start_epoch: int,
    with_calibration: bool,
) -> tuple[ModelParams, list[EpochRecord]]:
    rng = Rng(config.seed)
    shuffle_rng = rng.child(_STREAM_CONTINUE_BATCHES)
    params = start_params.copy()
    flat = params.pack()
    adam = AdamState.init(flat.size, lr=config.lr)
    train_idx = np.asarray(train_idx)
    pixels = dataset.shape[1] * dataset.shape[2]
    records: list[EpochRecord] = []

    for e in range(1, _continuation_epochs(config, start_epoch) + 1):
        if with_calibration:
            # Refresh empirical targets over the full training set with the
            # current model, then freeze them for this epoch's updates.
            train_preds = _predict_split(params, dataset, train_idx)
            train_outs = _split_outcomes(dataset, train_idx)
            assignment = bin_assignment(train_preds, config.bins)
            table = build_bins(train_preds, train_outs, config.bins)
            targets_flat = assign_p_emp(assignment, table)
            targets = {
                int(si): targets_flat[j * pixels : (j + 1) * pixels]
                for j, si in enumerate(train_idx)
            }

            def loss_on(si: int, probs: np.ndarray):
                return combined_loss(
                    probs,
                    dataset.samples[si].outcomes.ravel(),
                    targets[si],
                    config.cal_weight,
                )

        else:

            def loss_on(si: int, probs: np.ndarray):
                return bce_loss(probs, dataset.samples[si].outcomes.ravel())

        order = train_idx[shuffle_rng.permutation(len(train_idx))]
        flat, adam, train_loss = _run_epoch(
            flat, params, adam, dataset, order, config.batch_size, loss_on
        )
        params = params.unpack(flat)
        val_loss, val_brier, val_kl = _val_metrics(params, dataset, val_idx)
        records.append(
            EpochRecord(start_epoch + e, CAPE_PHASE, train_loss, val_loss, val_brier, val_kl)
        )

    return params, records


def train_cape(
    start_params: ModelParams,
    dataset: Dataset,
    train_idx: np.ndarray,
    val_idx: np.ndarray,
    config: TrainConfig,
    start_epoch: int,
) -> tuple[ModelParams, list[EpochRecord]]:
    """Resume from the warm-up checkpoint with the combined loss.

    Runs for the remaining shared epoch budget (or the configured
    override). Records continue the warm-up epoch numbering and carry the
    "cape" phase tag.
    """
    return _continue_training(
        start_params, dataset, train_idx, val_idx, config, start_epoch, True
    )


def train_bce_continue(
    start_params: ModelParams,
    dataset: Dataset,
    train_idx: np.ndarray,
    val_idx: np.ndarray,
    config: TrainConfig,
    start_epoch: int,
) -> tuple[ModelParams, list[EpochRecord]]:
    """Plain cross-entropy continuation from a checkpoint, same schedule as
    the calibrated continuation (reference arm for reduction checks)."""
    return _continue_training(
        start_params, dataset, train_idx, val_idx, config, start_epoch, False
    )


def evaluate_arm(
    params: ModelParams, dataset: Dataset, test_idx: np.ndarray, n_bins: int
) -> MetricsReport:
    """Metrics over all test pixels with a bin table built fresh on them."""
    preds = _predict_split(params, dataset, np.asarray(test_idx))
    outs = _split_outcomes(dataset, np.asarray(test_idx))
    true_p = _split_true_p(dataset, np.asarray(test_idx))
    return evaluate_predictions(preds, outs, true_p, n_bins)


@dataclass
class FoldRun:
    fold: int
    best_epoch: int
    stop_epoch: int
    warmup_records: list[EpochRecord]
    cape_records: list[EpochRecord]
    bce_metrics: MetricsReport
    cape_metrics: MetricsReport


@dataclass
class CellResult:
    target_rate: float
    n_samples: int
    folds: list[FoldRun] = field(default_factory=list)
    error: Optional[str] = None

    def arm_values(self, arm: str, metric: str) -> list[float]:
        out = []
        for f in self.folds:
            report = f.bce_metrics if arm == ARM_BCE else f.cape_metrics
            value = getattr(report, metric)
            if value is not None:
                out.append(float(value))
        return out

    def aggregate(self) -> dict[str, dict[str, tuple[float, float]]]:
        """Per-arm mean/std of each metric across folds."""
        summary: dict[str, dict[str, tuple[float, float]]] = {}
        for arm in (ARM_BCE, ARM_CAPE):
            summary[arm] = {}
            for metric in ("ece", "brier", "kl_true"):
                vals = self.arm_values(arm, metric)
                if vals:
                    summary[arm][metric] = (
                        float(np.mean(vals)),
                        float(np.std(vals)),
                    )
        return summary


@dataclass
class SweepResult:
    cells: list[CellResult]

    def rows(self) -> list[dict]:
        """Flat per-fold rows for the sweep CSV, in grid-then-fold order."""
        out = []
        for cell in self.cells:
            for f in cell.folds:
                for arm, report in ((ARM_BCE, f.bce_metrics), (ARM_CAPE, f.cape_metrics)):
                    out.append(
                        {
                            "rho": cell.target_rate,
                            "n": cell.n_samples,
                            "fold": f.fold,
                            "arm": arm,
                            "ece": report.ece,
                            "brier": report.brier,
                            "kl": report.kl_true,
                            "stop_epoch": f.stop_epoch,
                        }
                    )
        return out

    @property
    def failures(self) -> list[CellResult]:
        return [c for c in self.cells if c.error is not None]


def run_fold(
    dataset: Dataset,
    folds: list[np.ndarray],
    rotation: int,
    config: TrainConfig,
) -> FoldRun:
    """Warm-up once, then fork: evaluate the frozen checkpoint and the
    calibrated continuation on the same test fold."""
    train_idx, val_idx, test_idx = kfold_rotation(folds, rotation)
    warm = train_warmup(dataset, train_idx, val_idx, config)
    bce_metrics = evaluate_arm(warm.best_params, dataset, test_idx, config.bins)
    cape_params, cape_records = train_cape(
        warm.best_params, dataset, train_idx, val_idx, config, warm.stop_epoch
    )
    cape_metrics = evaluate_arm(cape_params, dataset, test_idx, config.bins)
    return FoldRun(
        fold=rotation,
        best_epoch=warm.best_epoch,
        stop_epoch=warm.stop_epoch,
        warmup_records=warm.records,
        cape_records=cape_records,
        bce_metrics=bce_metrics,
        cape_metrics=cape_metrics,
    )


def _run_cell(args: tuple) -> CellResult:
    field_base, rho, n_samples, train_config, cell_index = args
    master = train_config.seed
    try:
        cfg = replace(
            field_base, target_rate=rho, seed=derive_seed(master, _SWEEP_DATA, cell_index)
        )
        dataset = generate_dataset(cfg, n_samples)
        folds = split_kfold(
            n_samples, train_config.folds, derive_seed(master, _SWEEP_SPLIT, cell_index)
        )
        result = CellResult(target_rate=rho, n_samples=n_samples)
        for r in range(train_config.folds):
            tc = replace(
                train_config, seed=derive_seed(master, _SWEEP_TRAIN, cell_index, r)
            )
            result.folds.append(run_fold(dataset, folds, r, tc))
        return result
    except Exception:
        return CellResult(
            target_rate=rho, n_samples=n_samples, error=traceback.format_exc(limit=5)
        )


def run_experiment(
    field_base: FieldConfig,
    rates: list[float],
    sizes: list[int],
    train_config: TrainConfig,
    threads: int = 1,
) -> SweepResult:
    """Sweep over (event rate, dataset size) cells with per-fold rotations.

    Every cell derives its data, split and training seeds from the master
    seed and its grid position, so cells are independent and the sweep is
    deterministic regardless of worker count. Failed cells are recorded
    and do not abort the sweep.
    """
    grid = [(rho, n) for rho in rates for n in sizes]
    tasks = [
        (field_base, rho, n, train_config, ci) for ci, (rho, n) in enumerate(grid)
    ]
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(_run_cell, tasks))
    else:
        cells = [_run_cell(t) for t in tasks]
    return SweepResult(cells=cells)
