from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdrelabel.relabel import ConfusionGroups
from mdrelabel.metrics import compare_reports, confusion_matrix, evaluate, evaluate_many, per_class_table

labels = st.lists(st.integers(0, 4), min_size=1, max_size=60)


def test_two_class_toy():
    r = evaluate([0, 1, 1, 1], [0, 0, 1, 1])
    assert r.confusion.tolist() == [[1, 1], [0, 2]]
    assert r.per_class_f1[0] == pytest.approx(2 / 3)
    assert r.per_class_f1[1] == pytest.approx(4 / 5)
    assert r.macro_f1 == pytest.approx(float(Fraction(11, 15)), abs=1e-15)
    assert r.precision == pytest.approx((1 + 2 / 3) / 2)
    assert r.recall == pytest.approx((1 / 2 + 1) / 2)


def test_perfect_predictions():
    y = [0, 2, 2, 1, 0]
    r = evaluate(y, y, n_classes=3)
    assert r.precision == r.recall == r.macro_f1 == 1.0
    assert np.array_equal(r.confusion, np.diag([2, 1, 2]))


def test_class_never_predicted():
    # truth 2 is never predicted: precision 0 by convention, F1 0
    r = evaluate([0, 0, 1, 1], [0, 2, 1, 1], n_classes=3)
    assert r.per_class_precision[2] == 0 and r.per_class_f1[2] == 0
    assert r.per_class_f1[0] == pytest.approx(2 / 3)
    assert r.macro_f1 == pytest.approx((2 / 3 + 1 + 0) / 3)


def test_absent_class_excluded_from_average():
    r = evaluate([1, 1, 0], [1, 1, 0], n_classes=5)
    assert r.classes == [0, 1] and r.macro_f1 == 1.0
    assert np.isnan(r.per_class_f1[3])


def test_three_class_hand_computed():
    truth = [0, 0, 0, 1, 1, 2, 2, 2]
    pred = [0, 1, 0, 1, 2, 2, 2, 0]
    r = evaluate(pred, truth)
    assert r.confusion.tolist() == [[2, 1, 0], [0, 1, 1], [1, 0, 2]]
    # F1 = 2tp / (2tp + fp + fn): class 0: 4/6, class 1: 2/4, class 2: 4/6
    assert r.macro_f1 == pytest.approx((4 / 6 + 2 / 4 + 4 / 6) / 3)
    assert r.precision == pytest.approx((2 / 3 + 1 / 2 + 2 / 3) / 3)
    assert r.recall == pytest.approx((2 / 3 + 1 / 2 + 2 / 3) / 3)


def test_exclude_nominal():
    r = evaluate([0, 1, 1, 1], [0, 0, 1, 1], exclude_nominal=True)
    assert r.classes == [1] and r.macro_f1 == pytest.approx(0.8)


def test_pooling_over_trials():
    r = evaluate_many([([0, 1], [0, 0], -1), ([1, 1], [1, 1], -1)])
    assert r.confusion.tolist() == [[1, 1], [0, 2]]
    assert r.macro_f1 == pytest.approx(11 / 15)


def test_groups_credit_truth_class():
    g = ConfusionGroups((frozenset({1, 2}),))
    r = evaluate([1, 2, 2], [1, 1, 1], g, failure_end=0, n_classes=3)
    assert r.confusion.tolist() == [[0, 0, 0], [0, 3, 0], [0, 0, 0]]
    assert r.grouped


def test_length_mismatch():
    with pytest.raises(ValueError):
        evaluate([0, 1], [0, 1, 1])


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_confusion_invariants(data):
    truth = data.draw(labels)
    pred = data.draw(st.lists(st.integers(0, 4), min_size=len(truth), max_size=len(truth)))
    r = evaluate(pred, truth, n_classes=5)
    assert np.all(r.confusion >= 0)
    assert np.array_equal(r.confusion.sum(axis=1), np.bincount(truth, minlength=5))
    assert r.n_timesteps == len(truth)
    assert r.macro_f1 == pytest.approx(np.nanmean(r.per_class_f1))
    assert evaluate(pred, pred, n_classes=5).macro_f1 == 1.0


@settings(max_examples=100, deadline=None)
@given(st.data(), st.integers(-1, 60))
def test_grouping_never_lowers_f1(data, fend):
    truth = data.draw(labels)
    pred = data.draw(st.lists(st.integers(0, 4), min_size=len(truth), max_size=len(truth)))
    g = ConfusionGroups((frozenset({1, 2}), frozenset({3, 4})))
    plain = evaluate(pred, truth, n_classes=5)
    grouped = evaluate(pred, truth, g, fend, n_classes=5)
    assert grouped.macro_f1 >= plain.macro_f1 - 1e-12


def test_report_io_and_tables(tmp_path):
    r = evaluate([0, 1, 1, 1], [0, 0, 1, 1], provenance="relabeled")
    r.write(tmp_path, "x")
    assert (tmp_path / "x_confusion.csv").read_text() == "truth\\pred,0,1\n0,1,1\n1,0,2\n"
    rows = per_class_table(r, ["nominal", "leak"])
    assert rows[1]["name"] == "leak" and rows[1]["support"] == 2
    base = evaluate([0, 0, 0, 0], [0, 0, 1, 1])
    d = compare_reports({"baseline": base, "relabeled": r})
    assert d["relabeled"]["delta_macro_f1"] == pytest.approx(r.macro_f1 - base.macro_f1)


def test_confusion_matrix_range_check():
    with pytest.raises(ValueError):
        confusion_matrix([0, 3], [0, 1], 3)


def test_spurious_prediction_class_enters_average():
    r = evaluate([0, 2, 1, 1], [0, 0, 1, 1], n_classes=3)
    assert r.classes == [0, 1, 2]
    assert r.macro_f1 == pytest.approx((2 / 3 + 1 + 0) / 3)
