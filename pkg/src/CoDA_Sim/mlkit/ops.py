"""Numeric kernels shared by the models: logistic, binary cross-entropy and AUC."""

from typing import Sequence

import numpy as np

from CoDA_Sim.core import exceptions

SCORE_CLAMP = 1e-7


def logistic(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, clamped to [1e-7, 1 - 1e-7].

    Scores never reach 0 or 1; the bounds match ``clamped_bce``.
    """
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    positive = z >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-z[positive]))
    exp_z = np.exp(z[~positive])
    out[~positive] = exp_z / (1.0 + exp_z)
    return np.clip(out, SCORE_CLAMP, 1.0 - SCORE_CLAMP)


def _as_arrays(
    scores: Sequence[float], labels: Sequence[int]
) -> tuple[np.ndarray, np.ndarray]:
    scores_arr = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels_arr = np.asarray(labels).reshape(-1)
    if scores_arr.size == 0:
        raise exceptions.EmptyInputError("Scores and labels must be nonempty.")
    if scores_arr.shape != labels_arr.shape:
        raise ValueError("Scores and labels must have the same length.")
    if not np.all((labels_arr == 0) | (labels_arr == 1)):
        raise ValueError("Labels must be 0 or 1.")
    return scores_arr, labels_arr.astype(np.float64)


def clamped_bce(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy with scores clamped to [1e-7, 1 - 1e-7].

    No range validation; training loops call this on raw forward outputs.
    """
    clipped = np.clip(scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    values = labels * np.log(clipped) + (1.0 - labels) * np.log1p(-clipped)
    return float(-np.mean(values))


def bce_loss(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mean binary cross-entropy.

    Computes -(1/n) * sum(l * log(s) + (1 - l) * log(1 - s)).

    Args:
        scores: Predicted probabilities, each strictly inside (0, 1).
        labels: Binary labels; 1 marks a local sample for the classifier.

    Returns:
        The loss, always >= 0.

    Raises:
        EmptyInputError: If the inputs are empty.
        InvalidScoresError: If a score lies outside (0, 1).
    """
    scores_arr, labels_arr = _as_arrays(scores, labels)
    if not np.all((scores_arr > 0.0) & (scores_arr < 1.0)):
        raise exceptions.InvalidScoresError("Scores must lie strictly in (0, 1).")
    return max(clamped_bce(scores_arr, labels_arr), 0.0)


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half.

    Args:
        scores: Model scores.
        labels: Binary labels.

    Returns:
        Probability that a random positive outranks a random negative.

    Raises:
        EmptyInputError: If the inputs are empty.
        DegenerateValidationSetError: If only one class is present.
    """
    scores_arr, labels_arr = _as_arrays(scores, labels)
    n_pos = int(labels_arr.sum())
    n_neg = labels_arr.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise exceptions.DegenerateValidationSetError(
            "AUC needs both positive and negative labels."
        )
    _, inverse, counts = np.unique(scores_arr, return_inverse=True, return_counts=True)
    # average 1-based rank of each distinct score value
    upper = np.cumsum(counts)
    average_rank = upper - (counts - 1) / 2.0
    ranks = average_rank[inverse]
    rank_sum = float(ranks[labels_arr == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pairwise_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Reference O(n^2) AUC counting every positive/negative pair.

    Raises:
        DegenerateValidationSetError: If only one class is present.
    """
    scores_arr, labels_arr = _as_arrays(scores, labels)
    positives = scores_arr[labels_arr == 1]
    negatives = scores_arr[labels_arr == 0]
    if positives.size == 0 or negatives.size == 0:
        raise exceptions.DegenerateValidationSetError(
            "AUC needs both positive and negative labels."
        )
    wins = 0.0
    for positive in positives:
        for negative in negatives:
            if positive > negative:
                wins += 1.0
            elif positive == negative:
                wins += 0.5
    return wins / (positives.size * negatives.size)
