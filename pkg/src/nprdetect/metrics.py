"""Accuracy and average precision, both reported in percent."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    source_name: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel()
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")
        if self.scores.size == 0:
            raise ValueError("empty scored set")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0 or 1")


def _as_set(scores, labels=None) -> ScoredSet:
    if isinstance(scores, ScoredSet):
        return scores
    return ScoredSet(scores, labels)


def accuracy(scores, labels=None, threshold: float = 0.5) -> float:
    """Percent of samples where ``score >= threshold`` matches the label.

    A score exactly at the threshold counts as fake (label 1).
    """
    s = _as_set(scores, labels)
    pred = (s.scores >= threshold).astype(int)
    return 100.0 * float(np.mean(pred == s.labels))


def average_precision(scores, labels=None) -> float:
    """Mean precision at each positive of the descending-score ranking.

    Ties are broken by original position (earlier first), so the result is
    deterministic for tied scores.
    """
    s = _as_set(scores, labels)
    n_pos = int(np.sum(s.labels == 1))
    if n_pos == 0 or n_pos == s.labels.size:
        raise ValueError("average precision needs both classes")
    order = np.lexsort((np.arange(s.scores.size), -s.scores))
    ranked = s.labels[order] == 1
    hits = np.cumsum(ranked)
    ranks = np.arange(1, ranked.size + 1)
    return 100.0 * float(np.sum(hits[ranked] / ranks[ranked]) / n_pos)
