"""Confusion counts and the Matthews correlation coefficient.

The positive class is ``s = 1`` (selected / inspected). MCC is undefined
when its denominator vanishes, which happens exactly unless
``(tp > 0 and tn > 0) or (fp > 0 and fn > 0)``. Undefined values are
returned as ``None`` and must be skipped by callers, never treated as 0.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np


class ConfusionCounts(NamedTuple):
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(y_true, y_pred) -> ConfusionCounts:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError(f"label vectors differ in shape: {y_true.shape} vs {y_pred.shape}")
    if len(y_true) == 0:
        raise ValueError("cannot count an empty prediction")
    t = y_true.astype(bool)
    p = y_pred.astype(bool)
    tp = int(np.count_nonzero(t & p))
    fn = int(np.count_nonzero(t)) - tp
    fp = int(np.count_nonzero(p)) - tp
    tn = len(t) - tp - fn - fp
    return ConfusionCounts(tp, tn, fp, fn)


def mcc_defined(c: ConfusionCounts) -> bool:
    return (c.tp > 0 and c.tn > 0) or (c.fp > 0 and c.fn > 0)


def mcc(c: ConfusionCounts) -> float | None:
    """Matthews correlation coefficient, or ``None`` when undefined."""
    tp, tn, fp, fn = (int(v) for v in c)
    den2 = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den2 == 0:
        return None
    num = tp * tn - fp * fn
    root = math.isqrt(den2)
    if root * root == den2:
        # exact integer denominator: int / int is correctly rounded
        value = num / root
    else:
        value = num / math.sqrt(den2)
    return min(1.0, max(-1.0, value))


def mcc_score(y_true, y_pred) -> float | None:
    return mcc(confusion(y_true, y_pred))
