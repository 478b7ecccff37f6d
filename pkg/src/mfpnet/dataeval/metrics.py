"""Confusion matrices, accuracy and their CSV form."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


@dataclass
class ConfusionMatrix:
    classes: tuple[str, ...]
    counts: np.ndarray  # rows: true class, cols: predicted

    @classmethod
    def empty(cls, classes: Sequence[str]) -> "ConfusionMatrix":
        k = len(classes)
        return cls(tuple(classes), np.zeros((k, k), dtype=np.int64))

    @classmethod
    def from_predictions(cls, classes, y_true, y_pred) -> "ConfusionMatrix":
        cm = cls.empty(classes)
        np.add.at(cm.counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cm

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def row_percentages(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            pct = np.where(rows > 0, 100.0 * self.counts / np.maximum(rows, 1), 0.0)
        return pct

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.classes != other.classes:
            raise ValueError("cannot add confusion matrices over different class sets")
        return ConfusionMatrix(self.classes, self.counts + other.counts)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred", *self.classes])
            for name, row in zip(self.classes, self.counts):
                w.writerow([name, *[int(v) for v in row]])

    @classmethod
    def from_csv(cls, path) -> "ConfusionMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"{path}: empty confusion CSV")
        classes = tuple(rows[0][1:])
        body = rows[1:]
        if [r[0] for r in body] != list(classes):
            raise ValueError(f"{path}: row labels do not match the header")
        counts = np.array([[float(v) for v in r[1:]] for r in body])
        if counts.shape != (len(classes), len(classes)) or np.any(counts < 0):
            raise ValueError(f"{path}: confusion matrix must be square and non-negative")
        if np.all(counts == np.round(counts)):
            counts = counts.astype(np.int64)
        return cls(classes, counts)


def evaluate(predict: Callable[[np.ndarray], np.ndarray], inputs: np.ndarray,
             labels: Sequence[int], classes: Sequence[str]) -> tuple[ConfusionMatrix, float]:
    """Score ``predict`` (batch of inputs -> class indices) on a labelled test set."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot evaluate on an empty test set")
    if np.any(labels < 0) or np.any(labels >= len(classes)):
        raise ValueError("test labels fall outside the model's class set")
    pred = np.asarray(predict(inputs), dtype=np.int64)
    cm = ConfusionMatrix.from_predictions(classes, labels, pred)
    return cm, cm.accuracy
