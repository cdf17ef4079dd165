import itertools

import numpy as np
import pytest

from fedcluster.evaluation import accuracy, contingency_table, hungarian_match, nmi
from fedcluster.exceptions import InvalidInputError


def brute_force_min_cost_perm(cost):
    k = cost.shape[0]
    best_perm, best_cost = None, np.inf
    for perm in itertools.permutations(range(k)):
        total = sum(cost[i, perm[i]] for i in range(k))
        if total < best_cost:
            best_cost, best_perm = total, perm
    return np.array(best_perm), best_cost


def brute_force_accuracy(y_true, y_pred, k):
    """Best match rate over all k! label mappings."""
    n = len(y_true)
    best = 0
    for perm in itertools.permutations(range(k)):
        matches = sum(1 for t, p in zip(y_true, y_pred) if t == perm[p])
        best = max(best, matches)
    return best / n


def direct_summation_nmi(y_true, y_pred):
    table = contingency_table(y_true, y_pred).astype(float)
    n = table.sum()
    mutual = 0.0
    for i in range(table.shape[0]):
        for j in range(table.shape[1]):
            if table[i, j] > 0:
                mutual += (table[i, j] / n) * np.log(
                    table[i, j] * n / (table[i].sum() * table[:, j].sum())
                )
    def entropy(counts):
        p = counts[counts > 0] / counts.sum()
        return -np.sum(p * np.log(p))
    h1, h2 = entropy(table.sum(axis=1)), entropy(table.sum(axis=0))
    return mutual / np.sqrt(h1 * h2)


class TestHungarianMatch:
    def test_identity_favoring_cost(self):
        cost = np.ones((4, 4)) - np.eye(4)
        assert np.array_equal(hungarian_match(cost), np.arange(4))

    def test_anti_diagonal_favoring_cost(self):
        cost = np.ones((4, 4)) - np.eye(4)[::-1]
        assert np.array_equal(hungarian_match(cost), np.arange(4)[::-1])

    def test_random_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            cost = rng.uniform(0, 10, (5, 5))
            perm = hungarian_match(cost)
            _, oracle_cost = brute_force_min_cost_perm(cost)
            ours = sum(cost[i, perm[i]] for i in range(5))
            assert ours == pytest.approx(oracle_cost, abs=1e-12)

    def test_non_square_rejected(self):
        with pytest.raises(InvalidInputError):
            hungarian_match(np.zeros((2, 3)))


class TestAccuracy:
    def test_relabeled_perfect_prediction(self):
        assert accuracy([0, 0, 1, 1], [1, 1, 0, 0], 2) == 1.0

    def test_half_right_under_best_map(self):
        assert accuracy([0, 0, 1, 1], [0, 1, 0, 1], 2) == 0.5

    def test_random_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            y = rng.integers(0, 3, 12)
            y_hat = rng.integers(0, 3, 12)
            assert accuracy(y, y_hat, 3) == pytest.approx(
                brute_force_accuracy(y, y_hat, 3), abs=1e-12
            )

    def test_degenerate_predictions_padded(self):
        # constant predictor on balanced labels: best map fixes one class
        assert accuracy([0, 0, 1, 1, 2, 2], [0, 0, 0, 0, 0, 0], 3) == pytest.approx(1 / 3)

    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            accuracy([0, 1], [0], 2)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(InvalidInputError):
            accuracy([0, 3], [0, 1], 2)


class TestNmi:
    def test_identical_partitions(self):
        assert nmi([0, 1, 2, 0], [0, 1, 2, 0]) == pytest.approx(1.0, abs=1e-12)

    def test_identical_up_to_relabeling(self):
        assert nmi([0, 0, 1, 1], [1, 1, 0, 0]) == pytest.approx(1.0, abs=1e-12)

    def test_independent_balanced_partitions(self):
        assert nmi([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-12)

    def test_single_cluster_identical(self):
        assert nmi([0, 0, 0], [1, 1, 1]) == 1.0

    def test_single_cluster_differing(self):
        assert nmi([0, 0, 0], [0, 1, 1]) == 0.0

    def test_random_matches_direct_summation_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            y = rng.integers(0, 4, 20)
            y_hat = rng.integers(0, 3, 20)
            if len(np.unique(y)) < 2 or len(np.unique(y_hat)) < 2:
                continue
            assert nmi(y, y_hat) == pytest.approx(
                direct_summation_nmi(y, y_hat), abs=1e-12
            )


class TestInvariances:
    def test_metrics_invariant_under_relabeling(self):
        rng = np.random.default_rng(3)
        y = rng.integers(0, 4, 30)
        y_hat = rng.integers(0, 4, 30)
        base_acc = accuracy(y, y_hat, 4)
        base_nmi = nmi(y, y_hat)
        for perm in itertools.permutations(range(4)):
            relabeled = np.array([perm[v] for v in y_hat])
            assert accuracy(y, relabeled, 4) == pytest.approx(base_acc, abs=1e-12)
            assert nmi(y, relabeled) == pytest.approx(base_nmi, abs=1e-12)

    def test_constant_predictor_floor_on_balanced_labels(self):
        y = np.repeat(np.arange(5), 8)
        y_hat = np.zeros(40, dtype=int)
        assert accuracy(y, y_hat, 5) >= 1 / 5

    def test_nmi_symmetric(self):
        rng = np.random.default_rng(4)
        y = rng.integers(0, 3, 25)
        y_hat = rng.integers(0, 4, 25)
        assert nmi(y, y_hat) == pytest.approx(nmi(y_hat, y), abs=1e-12)
