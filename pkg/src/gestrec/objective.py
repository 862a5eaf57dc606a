"""Losses and evaluation metrics.

LongLoss multiplies each sample's cross-entropy by a distance weight
``1 + alpha * (d - b0) / (b1 - b0)``, so clips captured farther from the
camera contribute more to training. Distances act as constants: no
gradient flows into them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Node, as_node


@dataclass
class LongLossParams:
    """Distance weighting factor and thresholds for LongLoss."""

    alpha: float = 0.5
    b0: float = 4.0
    b1: float = 20.0
    clamp_distance: bool = True

    def __post_init__(self):
        if not self.b1 > self.b0:
            raise ValueError(f"b1 ({self.b1}) must exceed b0 ({self.b0})")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")

    def weights(self, distances: np.ndarray) -> np.ndarray:
        """Per-sample weights; distances clamped into [b0, b1] by default."""
        d = np.asarray(distances, dtype=np.float64)
        if self.clamp_distance:
            d = np.clip(d, self.b0, self.b1)
        return 1.0 + self.alpha * (d - self.b0) / (self.b1 - self.b0)


@dataclass
class Batch:
    """Logits with the matching labels and capture distances."""

    logits: Node
    labels: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        self.logits = as_node(self.logits)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.distances = np.asarray(self.distances, dtype=np.float64)
        B, m = self.logits.shape
        if B < 1:
            raise ValueError("batch must contain at least one sample")
        if self.labels.shape != (B,) or self.distances.shape != (B,):
            raise ValueError(f"labels {self.labels.shape} / distances {self.distances.shape} "
                             f"do not match logits ({B}, {m})")
        if self.labels.min() < 0 or self.labels.max() >= m:
            raise ValueError(f"labels must lie in [0, {m})")
        if not (self.distances > 0).all():
            raise ValueError("distances must be positive")


def cross_entropy(logits, label) -> Node:
    """Cross-entropy of a single (m,) logit vector against a class id."""
    logits = as_node(logits)
    return ops.cross_entropy_with_logits(logits, np.asarray(int(label)))


def batch_cross_entropy(logits, labels) -> Node:
    """Per-sample cross-entropy vector for (B, m) logits."""
    return ops.cross_entropy_with_logits(logits, labels)


def mean_cross_entropy(logits, labels) -> Node:
    return ops.mean(batch_cross_entropy(logits, labels))


def long_loss(batch: Batch, p: LongLossParams) -> Node:
    """Distance-weighted cross-entropy, averaged over the batch."""
    ce = batch_cross_entropy(batch.logits, batch.labels)
    w = p.weights(batch.distances).astype(np.asarray(ce.value).dtype)
    return ops.mean(ops.mul(ce, w))


def accuracy(predictions, labels) -> float:
    """Fraction of exact matches."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ValueError(f"predictions {predictions.shape} and labels {labels.shape} "
                         "must be equal-length and non-empty")
    return float((predictions == labels).mean())


def mean_average_precision(scores: np.ndarray, labels) -> float:
    """Macro one-vs-rest average precision from ranked class scores.

    Per class, samples are ranked by that class's score (descending,
    ties broken toward the lower sample index); AP is the mean of the
    precisions at each positive's rank. Classes without positives are
    excluded from the macro average.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError(f"scores {scores.shape} incompatible with labels {labels.shape}")
    N, m = scores.shape
    aps = []
    for c in range(m):
        positives = labels == c
        if not positives.any():
            continue
        order = np.argsort(-scores[:, c], kind="stable")
        hits = positives[order]
        ranks = np.flatnonzero(hits) + 1
        cum_hits = np.arange(1, ranks.size + 1)
        aps.append(float((cum_hits / ranks).mean()))
    if not aps:
        raise ValueError("no class has a positive sample")
    return float(np.mean(aps))
