import math

import pytest
from hypothesis import given, strategies as st

from covshift.metrics import ConfusionCounts, confusion, mcc, mcc_defined, mcc_score


def test_confusion_counts():
    assert confusion([1, 0], [1, 0]) == (1, 1, 0, 0)
    assert confusion([1, 0], [0, 1]) == (0, 0, 1, 1)
    # hand count: positions 0,5 TP; 2,4,6 TN; 3 FP; 1 FN
    assert confusion([1, 1, 0, 0, 0, 1, 0], [1, 0, 0, 1, 0, 1, 0]) == ConfusionCounts(tp=2, tn=3, fp=1, fn=1)


@pytest.mark.parametrize("a,b", [([1, 0], [1]), ([], [])])
def test_confusion_rejects_bad_input(a, b):
    with pytest.raises(ValueError):
        confusion(a, b)


def test_mcc_values():
    assert mcc(ConfusionCounts(1, 1, 0, 0)) == 1.0
    assert mcc(ConfusionCounts(0, 0, 1, 1)) == -1.0
    assert mcc(ConfusionCounts(2, 3, 1, 1)) == pytest.approx(5 / 12, abs=1e-12)
    assert mcc(ConfusionCounts(5, 0, 0, 0)) is None


def test_mcc_exact_on_large_perfect_counts():
    assert mcc(ConfusionCounts(123_456_789, 987_654_321, 0, 0)) == 1.0
    assert mcc(ConfusionCounts(0, 0, 10**9, 3 * 10**9)) == -1.0


def test_mcc_score_wrapper():
    assert mcc_score([1, 1, 0, 0, 0, 1, 0], [1, 0, 0, 1, 0, 1, 0]) == pytest.approx(5 / 12)


counts = st.builds(ConfusionCounts, *[st.integers(0, 10**6)] * 4)


@given(counts)
def test_undefined_exactly_when_no_positive_pair(c):
    defined = (c.tp > 0 and c.tn > 0) or (c.fp > 0 and c.fn > 0)
    assert (mcc(c) is not None) == defined == mcc_defined(c)


@given(counts)
def test_range(c):
    v = mcc(c)
    if v is not None:
        assert -1.0 <= v <= 1.0


@given(counts)
def test_symmetric_under_class_swap(c):
    a = mcc(c)
    b = mcc(ConfusionCounts(c.tn, c.tp, c.fn, c.fp))
    assert (a is None) == (b is None)
    if a is not None:
        assert a == pytest.approx(b, abs=1e-12)


@given(counts)
def test_prediction_flip_negates(c):
    a = mcc(c)
    b = mcc(ConfusionCounts(c.fp, c.fn, c.tp, c.tn))
    assert (a is None) == (b is None)
    if a is not None:
        assert a == pytest.approx(-b, abs=1e-12)


@given(counts)
def test_matches_float_formula(c):
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if den:
        want = (c.tp * c.tn - c.fp * c.fn) / math.sqrt(den)
        assert mcc(c) == pytest.approx(want, rel=1e-12, abs=1e-12)
