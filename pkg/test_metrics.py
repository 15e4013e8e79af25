"""
Evaluation metrics against first-principles and scikit-learn oracles
"""

import numpy as np
import pytest
from sklearn.metrics import cohen_kappa_score, f1_score

from errors import UndefinedMetricError
from metrics import ConfusionMatrix, EvalReport, accuracy_and_macro_f1, confusion_matrix, quadratic_weighted_kappa


def _kappa_by_loops(counts):
    k = counts.shape[0]
    total = counts.sum()
    rows, cols = counts.sum(axis=1), counts.sum(axis=0)
    observed = expected = 0.0
    for i in range(k):
        for j in range(k):
            w = (i - j) ** 2 / (k - 1) ** 2
            observed += w * counts[i, j]
            expected += w * rows[i] * cols[j] / total
    return 1.0 - observed / expected


def _samples(counts):
    k = counts.shape[0]
    truths = np.repeat(np.repeat(np.arange(k), k), counts.reshape(-1))
    preds = np.repeat(np.tile(np.arange(k), k), counts.reshape(-1))
    return truths, preds


def test_confusion_counts():
    assert confusion_matrix([0, 1, 2], [0, 1, 2], 3).counts.tolist() == np.eye(3, dtype=int).tolist()
    assert confusion_matrix([], [], 3).counts.sum() == 0
    cm = confusion_matrix([0, 2, 2], [0, 1, 2], 3)
    assert cm.counts.tolist() == [[1, 0, 0], [0, 0, 0], [0, 1, 1]]
    assert cm.total == 3


def test_confusion_rejects_bad_input():
    with pytest.raises(ValueError):
        confusion_matrix([0, 3], [0, 1], 3)
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0], 3)


def test_worked_example():
    cm = confusion_matrix([0, 2, 2], [0, 1, 2], 3)
    assert quadratic_weighted_kappa(cm) == pytest.approx(0.8, abs=1e-15)
    assert quadratic_weighted_kappa(cm) == pytest.approx(_kappa_by_loops(cm.counts), abs=1e-15)
    accuracy, macro_f1 = accuracy_and_macro_f1(cm)
    assert accuracy == pytest.approx(2 / 3)
    assert macro_f1 == pytest.approx((1.0 + 0.0 + 2 / 3) / 3)


def test_random_matrices_match_oracles():
    rng = np.random.default_rng(0)
    for _ in range(100):
        counts = rng.integers(0, 12, size=(5, 5))
        counts[0, 1] += 1
        cm = ConfusionMatrix(counts)
        truths, preds = _samples(counts)
        kappa = quadratic_weighted_kappa(cm)
        accuracy, macro_f1 = accuracy_and_macro_f1(cm)
        assert kappa == pytest.approx(_kappa_by_loops(counts), rel=0, abs=1e-12)
        assert kappa == pytest.approx(cohen_kappa_score(truths, preds, labels=list(range(5)), weights="quadratic"),
                                      rel=0, abs=1e-12)
        assert macro_f1 == pytest.approx(f1_score(truths, preds, labels=list(range(5)), average="macro",
                                                  zero_division=0), rel=0, abs=1e-12)
        assert accuracy == pytest.approx(np.mean(truths == preds), rel=0, abs=1e-15)


def test_perfect_predictions():
    cm = ConfusionMatrix(np.diag([3, 0, 5, 1, 2]))
    assert quadratic_weighted_kappa(cm) == 1.0
    assert accuracy_and_macro_f1(confusion_matrix([0, 1, 2], [0, 1, 2], 3)) == (1.0, 1.0)


def test_anti_diagonal_is_minus_one():
    assert quadratic_weighted_kappa(ConfusionMatrix(np.array([[0, 4], [4, 0]]))) == pytest.approx(-1.0)


def test_kappa_invariant_to_count_scaling():
    counts = np.array([[5, 1, 0], [2, 3, 1], [0, 2, 4]])
    assert quadratic_weighted_kappa(ConfusionMatrix(3 * counts)) == pytest.approx(
        quadratic_weighted_kappa(ConfusionMatrix(counts)), abs=1e-15)


def test_undefined_cases_raise():
    with pytest.raises(UndefinedMetricError):
        quadratic_weighted_kappa(ConfusionMatrix(np.zeros((5, 5), dtype=int)))
    with pytest.raises(UndefinedMetricError):
        accuracy_and_macro_f1(ConfusionMatrix(np.zeros((5, 5), dtype=int)))
    with pytest.raises(UndefinedMetricError):
        quadratic_weighted_kappa(confusion_matrix([2, 2, 2], [2, 2, 2], 5))


def test_macro_f1_below_one_off_diagonal():
    _, macro_f1 = accuracy_and_macro_f1(confusion_matrix([0, 1, 1], [0, 1, 0], 2))
    assert 0.0 <= macro_f1 < 1.0


def test_report_round_trips_through_dict():
    report = EvalReport.from_predictions([0, 2, 2, 1], [0, 1, 2, 1], 3)
    doc = report.to_dict()
    assert set(doc) == {"kappa", "accuracy", "macro_f1", "confusion", "n_samples"}
    assert doc["n_samples"] == 4
    again = EvalReport.from_dict(doc)
    assert again.kappa == report.kappa and again.confusion.to_list() == report.confusion.to_list()
    assert report.as_percentages()["accuracy"] == pytest.approx(75.0)
