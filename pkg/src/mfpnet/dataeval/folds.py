"""Subject-disjoint fold assignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[tuple[str, ...], ...]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def fold_of(self, subject: str) -> int:
        for i, f in enumerate(self.folds):
            if subject in f:
                return i
        raise KeyError(subject)

    def test_subjects(self, fold: int) -> set[str]:
        return set(self.folds[fold])

    def train_subjects(self, fold: int) -> set[str]:
        return {s for i, f in enumerate(self.folds) if i != fold for s in f}

    def to_json(self) -> dict:
        return {"seed": self.seed, "folds": [list(f) for f in self.folds]}


def make_subject_folds(subjects: Iterable[str], k: int = 10, seed: int = 0) -> FoldPlan:
    """Shuffle distinct subjects with ``seed`` and deal them round-robin into k folds."""
    uniq = sorted(set(subjects))
    if k < 1 or len(uniq) < k:
        raise ValueError(f"need at least {k} distinct subjects for {k} folds, got {len(uniq)}")
    order = np.random.default_rng(seed).permutation(len(uniq))
    folds = [[] for _ in range(k)]
    for n, i in enumerate(order):
        folds[n % k].append(uniq[i])
    return FoldPlan(tuple(tuple(sorted(f)) for f in folds), seed)


def subject_split(subjects: Iterable[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Shuffle subjects and put round(fraction * n) of them on the first side."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must be in (0, 1), got {fraction}")
    uniq = sorted(set(subjects))
    order = [uniq[i] for i in np.random.default_rng(seed).permutation(len(uniq))]
    cut = int(round(fraction * len(uniq)))
    first, second = sorted(order[:cut]), sorted(order[cut:])
    if not first or not second:
        raise ValueError(f"degenerate split of {len(uniq)} subjects at fraction {fraction}")
    return first, second
