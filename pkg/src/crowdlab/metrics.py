"""Counting errors, rotation accuracy and binary confusion-matrix scores."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, LengthMismatch


@dataclass(frozen=True)
class CountPair:
    y_c: float  # predicted count
    y_gt: float  # ground-truth count


@dataclass
class ConfusionMatrix:
    """Binary confusion matrix; positive is label 1 (violent)."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_labels(cls, predicted, actual) -> "ConfusionMatrix":
        predicted = np.asarray(predicted).astype(int)
        actual = np.asarray(actual).astype(int)
        if predicted.shape != actual.shape:
            raise LengthMismatch(f"{predicted.shape} vs {actual.shape}")
        return cls(
            tp=int(np.sum((predicted == 1) & (actual == 1))),
            fp=int(np.sum((predicted == 1) & (actual == 0))),
            tn=int(np.sum((predicted == 0) & (actual == 0))),
            fn=int(np.sum((predicted == 0) & (actual == 1))),
        )

    def as_rows(self) -> list[list[int]]:
        return [[self.tn, self.fp], [self.fn, self.tp]]


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float
    degenerate: tuple[str, ...] = field(default_factory=tuple)


def _errors(pairs) -> np.ndarray:
    pairs = list(pairs)
    if not pairs:
        raise EmptyInput("no count pairs")
    return np.array([p.y_c - p.y_gt for p in pairs], dtype=np.float64)


def mae(pairs) -> float:
    return float(np.mean(np.abs(_errors(pairs))))


def mse(pairs, root: bool = False) -> float:
    """Mean squared count error; ``root=True`` reports its square root."""
    value = float(np.mean(_errors(pairs) ** 2))
    return math.sqrt(value) if root else value


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def precision_recall_f1(cm: ConfusionMatrix) -> PRF:
    """Zero denominators give 0 and are listed in ``degenerate``."""
    flags = []
    if cm.tp + cm.fp == 0:
        p = 0.0
        flags.append("precision")
    else:
        p = cm.tp / (cm.tp + cm.fp)
    if cm.tp + cm.fn == 0:
        r = 0.0
        flags.append("recall")
    else:
        r = cm.tp / (cm.tp + cm.fn)
    if p + r == 0:
        f1 = 0.0
        flags.append("f1")
    else:
        f1 = f1_score(p, r)
    return PRF(p, r, f1, tuple(flags))


def rotation_accuracy(predicted, actual) -> float:
    predicted = np.asarray(predicted)
    actual = np.asarray(actual)
    if predicted.shape != actual.shape:
        raise LengthMismatch(f"{predicted.shape} vs {actual.shape}")
    if predicted.size == 0:
        raise EmptyInput("no labels")
    return float(np.mean(predicted == actual))
