"""Quantile binning, calibration metrics (ECE, Brier, Bernoulli KL) and the
cross-entropy loss pair used for calibration-aware training.

Binning is rank-based: predictions are sorted (ties broken by position)
and split into B contiguous runs of near-equal size, so every bin is
non-empty whenever N >= B. Losses are means over pixels; gradients are
returned alongside the loss value.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import as_f64, require_finite

log = logging.getLogger(__name__)

LOSS_EPS = 1e-7  # clamp for log() in losses
KL_EPS = 1e-6  # clamp for predicted probabilities in the KL metric


@dataclass
class BinTable:
    """Per-bin summary of a prediction/outcome set.

    edges has B+1 entries with edges[0] = 0 and edges[B] = 1; interior
    edges sit at the order statistics that close each bin. prob_pred is
    the mean predicted probability per bin, prob_true the mean observed
    outcome per bin.
    """

    edges: np.ndarray  # B+1
    counts: np.ndarray  # B, int
    prob_pred: np.ndarray  # B
    prob_true: np.ndarray  # B

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    @property
    def n_pixels(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricsReport:
    ece: float
    brier: float
    kl_true: Optional[float]  # None when the data carries no true probabilities
    bin_table: BinTable
    n_pixels: int


def bin_assignment(predictions: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin index (0..B-1) per prediction, by rank with stable tie-breaking.

    Bin b covers sorted ranks [ceil(b*N/B), ceil((b+1)*N/B)), so bin sizes
    differ by at most one and no bin is empty for N >= B.
    """
    predictions = as_f64(predictions).ravel()
    n = predictions.size
    if n_bins < 1:
        raise ValueError("number of bins must be >= 1")
    if n < n_bins:
        raise ValueError(
            f"need at least as many predictions as bins (N={n} < B={n_bins}); lower the bin count"
        )
    order = np.argsort(predictions, kind="stable")
    starts = (np.arange(n_bins + 1) * n + n_bins - 1) // n_bins  # ceil(b*N/B)
    rank_bins = np.repeat(np.arange(n_bins), np.diff(starts))
    assignment = np.empty(n, dtype=np.intp)
    assignment[order] = rank_bins
    return assignment


def build_bins(predictions: np.ndarray, outcomes: np.ndarray, n_bins: int) -> BinTable:
    """Quantile BinTable over flat predictions in (0,1) and binary outcomes."""
    predictions = as_f64(predictions).ravel()
    outcomes = as_f64(outcomes).ravel()
    if predictions.size != outcomes.size:
        raise ValueError(
            f"predictions ({predictions.size}) and outcomes ({outcomes.size}) differ in length"
        )
    require_finite("predictions", predictions)
    if predictions.size and (predictions.min() <= 0.0 or predictions.max() >= 1.0):
        raise ValueError("predictions must lie strictly inside (0, 1)")

    n = predictions.size
    assignment = bin_assignment(predictions, n_bins)
    counts = np.bincount(assignment, minlength=n_bins)
    prob_pred = np.bincount(assignment, weights=predictions, minlength=n_bins) / counts
    prob_true = np.bincount(assignment, weights=outcomes, minlength=n_bins) / counts

    sorted_preds = np.sort(predictions, kind="stable")
    closing = (np.arange(1, n_bins) * n + n_bins - 1) // n_bins  # ceil(b*N/B), 1-indexed rank
    edges = np.empty(n_bins + 1)
    edges[0] = 0.0
    edges[-1] = 1.0
    edges[1:-1] = sorted_preds[closing - 1]
    return BinTable(edges=edges, counts=counts, prob_pred=prob_pred, prob_true=prob_true)


def assign_p_emp(assignment: np.ndarray, table: BinTable) -> np.ndarray:
    """Per-pixel empirical-probability targets: each pixel gets its bin's prob_true.

    The result is a frozen constant array; no gradient flows through it.
    """
    assignment = np.asarray(assignment)
    if assignment.size and (assignment.min() < 0 or assignment.max() >= table.n_bins):
        raise ValueError("bin assignment indices out of range for this table")
    return table.prob_true[assignment].copy()


def ece(table: BinTable) -> float:
    """Expected calibration error: mean absolute per-bin gap |prob_true - prob_pred|."""
    return float(np.mean(np.abs(table.prob_true - table.prob_pred)))


def brier_score(predictions: np.ndarray, outcomes: np.ndarray) -> float:
    """Mean squared difference between predictions and binary outcomes."""
    predictions = as_f64(predictions).ravel()
    outcomes = as_f64(outcomes).ravel()
    if predictions.size != outcomes.size:
        raise ValueError("predictions and outcomes differ in length")
    diff = predictions - outcomes
    return float(np.mean(diff * diff))


def kl_to_true(
    predictions: np.ndarray, true_p: Optional[np.ndarray], eps: float = KL_EPS
) -> float:
    """Mean per-pixel Bernoulli KL of the true probability against the prediction.

    Computable only on synthetic data where the latent probability is
    known; raises when true_p is unavailable rather than returning 0.
    """
    if true_p is None:
        raise ValueError("true probabilities unavailable; KL cannot be computed")
    predictions = as_f64(predictions).ravel()
    true_p = as_f64(true_p).ravel()
    if predictions.size != true_p.size:
        raise ValueError("predictions and true probabilities differ in length")
    f = np.clip(predictions, eps, 1.0 - eps)
    p = true_p
    terms = np.zeros_like(p)
    pos = p > 0.0
    terms[pos] += p[pos] * np.log(p[pos] / f[pos])
    neg = p < 1.0
    terms[neg] += (1.0 - p[neg]) * np.log((1.0 - p[neg]) / (1.0 - f[neg]))
    return float(np.mean(terms))


def _cross_entropy(predictions: np.ndarray, targets: np.ndarray, what: str):
    predictions = as_f64(predictions).ravel()
    targets = as_f64(targets).ravel()
    if predictions.size != targets.size:
        raise ValueError(f"predictions and {what} differ in length")
    n = predictions.size
    clamped = np.clip(predictions, LOSS_EPS, 1.0 - LOSS_EPS)
    n_clamped = int(np.count_nonzero(clamped != predictions))
    if n_clamped:
        log.debug("%d/%d predictions clamped to [%g, 1-%g] in %s loss",
                  n_clamped, n, LOSS_EPS, LOSS_EPS, what)
    loss = -float(
        np.mean(targets * np.log(clamped) + (1.0 - targets) * np.log1p(-clamped))
    )
    grad = (clamped - targets) / (n * clamped * (1.0 - clamped))
    return loss, grad


def bce_loss(predictions: np.ndarray, outcomes: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy against observed outcomes, with its gradient."""
    return _cross_entropy(predictions, outcomes, "outcome")


def calibration_loss(
    predictions: np.ndarray, p_emp_targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against frozen empirical-probability targets in [0,1]."""
    return _cross_entropy(predictions, p_emp_targets, "calibration-target")


def combined_loss(
    predictions: np.ndarray,
    outcomes: np.ndarray,
    p_emp_targets: np.ndarray,
    cal_weight: float,
) -> tuple[float, np.ndarray]:
    """(1-w) * outcome cross-entropy + w * calibration cross-entropy.

    The endpoints reduce exactly (bit for bit) to the single losses.
    """
    if not 0.0 <= cal_weight <= 1.0:
        raise ValueError(f"calibration weight must be in [0, 1], got {cal_weight}")
    if cal_weight == 0.0:
        return bce_loss(predictions, outcomes)
    if cal_weight == 1.0:
        return calibration_loss(predictions, p_emp_targets)
    loss_d, grad_d = bce_loss(predictions, outcomes)
    loss_c, grad_c = calibration_loss(predictions, p_emp_targets)
    loss = (1.0 - cal_weight) * loss_d + cal_weight * loss_c
    grad = (1.0 - cal_weight) * grad_d + cal_weight * grad_c
    return loss, grad


def evaluate_predictions(
    predictions: np.ndarray,
    outcomes: np.ndarray,
    true_p: Optional[np.ndarray],
    n_bins: int,
) -> MetricsReport:
    """Full metrics for a flat prediction set, building a fresh BinTable."""
    predictions = as_f64(predictions).ravel()
    outcomes = as_f64(outcomes).ravel()
    table = build_bins(predictions, outcomes, n_bins)
    kl = kl_to_true(predictions, true_p) if true_p is not None else None
    return MetricsReport(
        ece=ece(table),
        brier=brier_score(predictions, outcomes),
        kl_true=kl,
        bin_table=table,
        n_pixels=predictions.size,
    )
