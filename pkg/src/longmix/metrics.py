"""Evaluation utilities: permutation-matched misclassification, bias/MSE.

Misclassification minimizes the error over label permutations via the
Hungarian assignment on the confusion matrix, so it is invariant to any
global relabeling of the predictions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .exceptions import ArgumentError

__all__ = ["ConfusionSummary", "misclassification", "bias_mse_table"]


@dataclass
class ConfusionSummary:
    matrix: np.ndarray  # (K_true, K_pred), rows = true class
    rate: float
    permutation: np.ndarray  # permutation[pred_label] = matched true class


def misclassification(
    true_labels,
    predicted_labels,
    n_true: int | None = None,
    n_pred: int | None = None,
):
    """Best-matching misclassification rate, or None when K differs.

    ``n_true`` / ``n_pred`` fix the label-space sizes (defaulting to the
    largest observed label plus one); when they differ the result is the
    not-comparable marker ``None`` (excluded from aggregates).
    """
    t = np.asarray(true_labels, dtype=int)
    p = np.asarray(predicted_labels, dtype=int)
    if t.shape != p.shape:
        raise ArgumentError("label vectors must have equal length")
    k_true = int(t.max()) + 1 if n_true is None else n_true
    k_pred = int(p.max()) + 1 if n_pred is None else n_pred
    if k_pred != k_true:
        return None
    C = np.zeros((k_true, k_true), dtype=int)
    np.add.at(C, (t, p), 1)
    rows, cols = linear_sum_assignment(-C)
    matched = C[rows, cols].sum()
    perm = np.empty(k_true, dtype=int)
    perm[cols] = rows
    rate = 1.0 - matched / t.shape[0]
    return ConfusionSummary(matrix=C, rate=float(rate), permutation=perm)


def bias_mse_table(estimates: np.ndarray, true_values: np.ndarray):
    """Per-parameter mean, bias*100 and MSE*100 over replications.

    ``estimates`` is (R, P) with rows already aligned to the true
    component order.  Returns a dict of arrays; an empty conditioning
    set yields the empty-table marker ``None``.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    if est.shape[0] == 0:
        return None
    truth = np.asarray(true_values, dtype=float)
    if est.shape[1] != truth.shape[0]:
        raise ArgumentError("estimate width does not match the number of parameters")
    mean = est.mean(axis=0)
    bias100 = (mean - truth) * 100.0
    mse100 = np.mean((est - truth[None, :]) ** 2, axis=0) * 100.0
    return {"mean": mean, "bias100": bias100, "mse100": mse100, "true": truth}
