"""
CTRForge Metrics
Rank-based AUC with average ranks for ties, its pairwise-concordance
reference, and Logloss with probability clamping.
"""

from dataclasses import dataclass

import numpy as np

from config import PROB_EPS
from errors import MetricError


@dataclass(frozen=True, eq=False, init=False)
class ScoredSet:
    """Scores paired with binary labels."""

    scores: np.ndarray
    labels: np.ndarray

    def __init__(self, scores, labels):
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(labels, dtype=np.float64).reshape(-1)
        if scores.shape != labels.shape:
            raise MetricError(f"{scores.size} scores for {labels.size} labels")
        if not np.all((labels == 0) | (labels == 1)):
            raise MetricError("labels must be 0 or 1")
        if not np.all(np.isfinite(scores)):
            raise MetricError(f"{int(np.sum(~np.isfinite(scores)))} non-finite scores")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.scores.size

    @property
    def num_positive(self):
        return int(self.labels.sum())

    @property
    def num_negative(self):
        return len(self) - self.num_positive

    def _require_both_classes(self):
        if self.num_positive == 0 or self.num_negative == 0:
            raise MetricError(
                f"AUC needs both classes, got {self.num_positive} positives "
                f"and {self.num_negative} negatives"
            )


def tied_rank(scores):
    """
    1-based ranks in ascending score order; tied scores share their average rank.

    Args:
        scores: 1-D array

    Returns:
        np.ndarray: float ranks aligned with `scores`
    """
    scores = np.asarray(scores, dtype=np.float64)
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    average = starts + (counts + 1) / 2.0
    return average[inverse.reshape(-1)]


def auc(scored):
    """
    (sum of positive ranks - M(M+1)/2) / (M * N).

    Raises:
        MetricError: When one class is absent
    """
    scored._require_both_classes()
    m, n = scored.num_positive, scored.num_negative
    rank_sum = tied_rank(scored.scores)[scored.labels == 1].sum()
    return float((rank_sum - m * (m + 1) / 2.0) / (m * n))


def auc_oracle(scored):
    """(concordant + 0.5 * tied pairs) / (M * N) by explicit double loop."""
    scored._require_both_classes()
    positives = scored.scores[scored.labels == 1]
    negatives = scored.scores[scored.labels == 0]
    credit = 0.0
    for p in positives:
        for q in negatives:
            if p > q:
                credit += 1.0
            elif p == q:
                credit += 0.5
    return float(credit / (len(positives) * len(negatives)))


def logloss(scored):
    """
    Mean binary cross-entropy with probabilities clamped to [PROB_EPS, 1 - PROB_EPS].

    Raises:
        MetricError: For an empty set
    """
    if len(scored) == 0:
        raise MetricError("logloss of an empty set")
    p = np.clip(scored.scores, PROB_EPS, 1.0 - PROB_EPS)
    y = scored.labels
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))
