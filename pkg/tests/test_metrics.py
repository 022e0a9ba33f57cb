import math

import numpy as np
import pytest

from errors import MetricError
from metrics import ScoredSet, auc, auc_oracle, logloss, tied_rank


class TestAuc:
    def test_perfect_separation(self):
        assert auc(ScoredSet([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])) == 1.0

    def test_all_tied(self):
        assert auc(ScoredSet([0.3] * 6, [1, 0, 1, 0, 0, 1])) == 0.5

    def test_three_of_four_pairs(self):
        assert auc(ScoredSet([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])) == 0.75

    def test_single_class(self):
        with pytest.raises(MetricError):
            auc(ScoredSet([0.1, 0.2], [1, 1]))
        with pytest.raises(MetricError):
            auc_oracle(ScoredSet([0.1, 0.2], [0, 0]))

    def test_matches_pairwise_oracle_with_ties(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            n = int(rng.integers(2, 30))
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            # coarse scores force plenty of ties
            scores = rng.integers(0, 5, size=n) / 4.0
            scored = ScoredSet(scores, labels)
            assert auc(scored) == auc_oracle(scored)

    def test_tied_rank_averages(self):
        np.testing.assert_array_equal(tied_rank([0.5, 0.1, 0.5, 0.9]), [2.5, 1.0, 2.5, 4.0])

    @pytest.mark.parametrize("transform", [np.exp, np.arctan, lambda s: s ** 3 + 2.0 * s])
    def test_invariant_under_increasing_transform(self, transform):
        rng = np.random.default_rng(9)
        scores = np.round(rng.normal(size=300), 1)
        labels = rng.integers(0, 2, size=300)
        assert auc(ScoredSet(transform(scores), labels)) == auc(ScoredSet(scores, labels))

    def test_flipping_labels_and_negating_scores(self):
        rng = np.random.default_rng(10)
        scores = rng.integers(0, 8, size=250) / 8.0
        labels = rng.integers(0, 2, size=250)
        assert auc(ScoredSet(-scores, 1 - labels)) == auc(ScoredSet(scores, labels))


class TestLogloss:
    def test_confident_correct_is_near_zero(self):
        assert logloss(ScoredSet([1.0], [1])) == pytest.approx(1e-7, rel=1e-3)

    def test_half_is_ln2(self):
        assert logloss(ScoredSet([0.5] * 4, [1, 0, 0, 0])) == pytest.approx(math.log(2), abs=1e-12)

    def test_hand_case(self):
        assert logloss(ScoredSet([0.8, 0.4], [1, 0])) == pytest.approx(0.366985, abs=1e-6)

    def test_constant_predictor_is_best_at_base_rate(self):
        labels = [1] * 30 + [0] * 70
        grid = np.round(np.linspace(0.01, 0.99, 99), 2)
        losses = [logloss(ScoredSet([p] * 100, labels)) for p in grid]
        assert grid[int(np.argmin(losses))] == 0.3

    def test_empty(self):
        with pytest.raises(MetricError):
            logloss(ScoredSet([], []))


class TestScoredSet:
    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            ScoredSet([0.1, 0.2], [1])

    def test_labels_must_be_binary(self):
        with pytest.raises(MetricError):
            ScoredSet([0.1, 0.2], [1, 2])

    def test_class_counts(self):
        scored = ScoredSet([0.1, 0.2, 0.3], [1, 0, 1])
        assert (scored.num_positive, scored.num_negative) == (2, 1)

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_scores(self, bad):
        with pytest.raises(MetricError, match="non-finite"):
            ScoredSet([bad, 0.2, 0.7, 0.1], [1, 0, 1, 0])
