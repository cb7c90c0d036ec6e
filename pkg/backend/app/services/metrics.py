"""Confusion counts and detection metrics; abnormal is the positive class"""

from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field


class MetricError(Exception):
    """Custom exception for metric computation errors"""
    pass


class UndefinedMetricError(MetricError):
    """The metric's denominator is zero"""
    pass


class Confusion(BaseModel):
    tp: int = Field(default=0, ge=0)
    fp: int = Field(default=0, ge=0)
    tn: int = Field(default=0, ge=0)
    fn: int = Field(default=0, ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(
            tp=self.tp + other.tp, fp=self.fp + other.fp,
            tn=self.tn + other.tn, fn=self.fn + other.fn,
        )


def confusion(predictions: Sequence[int], labels: Sequence[int]) -> Confusion:
    """
    Count outcomes with 1 (abnormal) as the positive class.

    Raises:
        MetricError: On length mismatch or empty input
    """
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise MetricError(f"{pred.size} predictions vs {true.size} labels")
    if pred.size == 0:
        raise MetricError("cannot score zero samples")
    return Confusion(
        tp=int(np.sum((pred == 1) & (true == 1))),
        fp=int(np.sum((pred == 1) & (true == 0))),
        tn=int(np.sum((pred == 0) & (true == 0))),
        fn=int(np.sum((pred == 0) & (true == 1))),
    )


def da(c: Confusion) -> float:
    """Detection accuracy: (tp + tn) / total"""
    if c.total == 0:
        raise MetricError("DA of an empty confusion matrix")
    return (c.tp + c.tn) / c.total


def tpr(c: Confusion) -> float:
    """True positive rate: tp / (tp + fn)"""
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("TPR undefined: no abnormal samples")
    return c.tp / (c.tp + c.fn)


def pre(c: Confusion) -> float:
    """Precision: tp / (tp + fp)"""
    if c.tp + c.fp == 0:
        raise UndefinedMetricError("PRE undefined: nothing predicted abnormal")
    return c.tp / (c.tp + c.fp)


def safe_metric(fn, c: Confusion) -> Optional[float]:
    """Metric value, or None when it is undefined for ``c``"""
    try:
        return fn(c)
    except MetricError:
        return None
