import numpy as np
import pytest

from umq import metrics as MM
from umq.rng import Rng


def test_perfect_predictor():
    labels = np.array([1.5, -2.0, 0.5, 3.0, -1.0])
    m = MM.regression_metrics(labels.copy(), labels)
    assert m["acc7"] == 1.0
    assert m["acc2"] == 1.0
    assert m["f1"] == 1.0
    assert m["mae"] == 0.0
    assert m["corr"] == pytest.approx(1.0)


def test_hand_example():
    m = MM.regression_metrics(np.array([1.2, -0.5]), np.array([1.0, -1.0]))
    assert m["mae"] == pytest.approx(0.35)
    assert m["acc2"] == 1.0
    # round-half-away-from-zero: round(-0.5) = -1 matches round(-1.0)
    assert m["acc7"] == 1.0


def test_neutral_labels_excluded_from_acc2_f1():
    preds = np.array([2.0, -2.0, 5.0])
    labels = np.array([1.0, -1.0, 0.0])
    m = MM.regression_metrics(preds, labels)
    assert m["acc2"] == 1.0  # the label-0 sample does not count
    all_neutral = MM.regression_metrics(np.array([1.0]), np.array([0.0]))
    assert all_neutral["acc2"] is None
    assert all_neutral["f1"] is None


def test_rounding_rule_half_away_from_zero():
    np.testing.assert_array_equal(MM.round_half_away(np.array([0.5, -0.5, 1.5, -1.5, 2.4])),
                                  [1.0, -1.0, 2.0, -2.0, 2.0])
    np.testing.assert_array_equal(MM.seven_class(np.array([4.7, -9.0, 2.5])),
                                  [3.0, -3.0, 3.0])


def test_corr_undefined_for_constant_series():
    m = MM.regression_metrics(np.array([1.0, 1.0]), np.array([1.0, -1.0]))
    assert m["corr"] is None


def test_metric_ranges():
    rng = Rng(1)
    preds = rng.normal(200) * 2
    labels = np.clip(rng.normal(200) * 1.5, -3, 3)
    m = MM.regression_metrics(preds, labels)
    assert 0.0 <= m["acc7"] <= 1.0
    assert 0.0 <= m["acc2"] <= 1.0
    assert 0.0 <= m["f1"] <= 1.0
    assert m["mae"] >= 0.0
    assert -1.0 <= m["corr"] <= 1.0


def test_metrics_permutation_invariant():
    rng = Rng(2)
    preds = rng.normal(50)
    labels = np.clip(rng.normal(50), -3, 3)
    base = MM.regression_metrics(preds, labels)
    perm = Rng(3).permutation(50)
    shuffled = MM.regression_metrics(preds[perm], labels[perm])
    assert set(base) == set(shuffled)
    for key in base:
        assert base[key] == pytest.approx(shuffled[key], rel=1e-12)


def test_binary_accuracy():
    logits = np.array([2.0, -1.0, 0.5, -0.5])
    labels = np.array([1.0, 0.0, 0.0, 1.0])
    m = MM.binary_metrics(logits, labels)
    assert m["acc"] == 0.5
