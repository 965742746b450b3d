"""Seeded stratified splitting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FoldPlan:
    """``folds[i]`` is the fold index of sample ``i``."""

    folds: np.ndarray
    k: int

    def test_indices(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.folds == f)

    def train_indices(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.folds != f)

    def class_counts(self, labels) -> np.ndarray:
        """``(k, 2)`` array of negatives / positives per fold."""
        y = np.asarray(labels)
        return np.array([[np.sum((self.folds == f) & (y == c)) for c in (0, 1)] for f in range(self.k)])

    def __iter__(self):
        for f in range(self.k):
            yield self.train_indices(f), self.test_indices(f)


def stratified_kfold(labels, k: int, seed: int | np.random.Generator) -> FoldPlan:
    """Deal each class's shuffled indices round-robin over ``k`` folds."""
    y = np.asarray(labels).astype(np.int64)
    if k < 2:
        raise ValueError("k must be at least 2")
    minority = min(int(np.sum(y == 0)), int(np.sum(y == 1)))
    if k > minority:
        raise ValueError(f"k={k} exceeds the minority class count {minority}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    folds = np.empty(y.size, dtype=np.int64)
    offset = 0
    for c in (1, 0):
        idx = rng.permutation(np.flatnonzero(y == c))
        # continue dealing where the previous class stopped so fold sizes stay balanced
        folds[idx] = (offset + np.arange(idx.size)) % k
        offset = (offset + idx.size) % k
    return FoldPlan(folds, k)


def holdout_split(labels, fraction: float, seed: int | np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Stratified ``(train_idx, test_idx)`` with ``round(fraction * n)`` test samples."""
    y = np.asarray(labels).astype(np.int64)
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_test = int(round(fraction * y.size))
    counts = np.array([np.sum(y == 0), np.sum(y == 1)])
    exact = fraction * counts
    per_class = np.floor(exact).astype(int)
    # largest remainder so the per-class counts add up to n_test
    for c in np.argsort(-(exact - per_class), kind="stable")[: n_test - per_class.sum()]:
        per_class[c] += 1
    test = []
    for c in (0, 1):
        idx = rng.permutation(np.flatnonzero(y == c))
        test.append(idx[: per_class[c]])
    test_idx = np.sort(np.concatenate(test))
    train_idx = np.setdiff1d(np.arange(y.size), test_idx)
    return train_idx, test_idx


def stratified_subsample(labels, indices, size: int, seed: int | np.random.Generator) -> np.ndarray:
    """Stratified subset of ``indices`` with ``size`` elements (sorted)."""
    indices = np.asarray(indices)
    if size >= indices.size:
        return np.sort(indices)
    y = np.asarray(labels)[indices]
    keep, _ = holdout_split(y, 1.0 - size / indices.size, seed)
    return np.sort(indices[keep])
