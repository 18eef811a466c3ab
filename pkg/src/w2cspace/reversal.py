"""Context-reversal probe for the sentiment task.

Contexts are ranked by how much closer they sit to positive than to
negative sentences; mirroring the ranking (rank r swaps centroids with
rank k-1-r) should flip predictions if the distances carry the
sentiment.  The report gives the original accuracy, the accuracy after
reversal, and the fraction of predictions that flipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .classify import context_relative_distance, map_coords
from .contexts import ContextSpace
from .encoder import FeatureBatch
from .errors import DegenerateInputError
from .mapper import MapperNet


@dataclass
class ContextRanking:
    positive_affinity: np.ndarray   # (k,) mean pooled distance to positive sentences
    negative_affinity: np.ndarray   # (k,)
    order: list[int]                # context indices, most negative-affine first

    @property
    def net_affinity(self) -> np.ndarray:
        return self.positive_affinity - self.negative_affinity


@dataclass
class ReversalReport:
    original_accuracy: float
    modified_accuracy: float
    reversal_rate: float
    ranking_before: list[int]
    ranking_after: list[int]
    config: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "oa": self.original_accuracy,
            "ca": self.modified_accuracy,
            "ra": self.reversal_rate,
            "ranking_before": self.ranking_before,
            "ranking_after": self.ranking_after,
            "config": self.config,
        }


def rank_contexts(space: ContextSpace, mapper: MapperNet,
                  data: Sequence[tuple[FeatureBatch, int]]) -> ContextRanking:
    """Rank contexts from negative to positive sentiment affinity.

    Affinity of context j to a class is the mean over that class's
    sentences of the mean-pooled distance column j.  Ties keep index
    order (argsort is stable).
    """
    pos_rows = []
    neg_rows = []
    for fb, label in data:
        pooled = context_relative_distance(space, map_coords(mapper, fb)).mean(axis=0)
        (pos_rows if label == 1 else neg_rows).append(pooled)
    if not pos_rows or not neg_rows:
        raise DegenerateInputError("ranking requires sentences from both classes")
    pos = np.mean(pos_rows, axis=0)
    neg = np.mean(neg_rows, axis=0)
    order = np.argsort(pos - neg, kind="stable")
    return ContextRanking(positive_affinity=pos, negative_affinity=neg,
                          order=[int(i) for i in order])


def reverse_context_space(space: ContextSpace, ranking: ContextRanking) -> ContextSpace:
    """Swap rank-symmetric centroids; the merge matrix stays put.

    Applying the same ranking twice restores the original space bitwise.
    """
    k = space.k
    if sorted(ranking.order) != list(range(k)):
        raise ValueError("ranking is not a permutation of the context indices")
    centroids = space.centroids.copy()
    for r in range(k // 2):
        i, j = ranking.order[r], ranking.order[k - 1 - r]
        centroids[[i, j]] = centroids[[j, i]]
    return ContextSpace(centroids=centroids, merge=space.merge.copy(),
                        seed=space.seed, meta=dict(space.meta))


def reversal_metrics(original: Sequence[int], modified: Sequence[int],
                     labels: Sequence[int]) -> tuple[float, float, float]:
    """(original accuracy, modified accuracy, reversal rate), percentages.

    The reversal rate counts every evaluated sentence whose prediction
    changed, over all evaluated sentences.
    """
    if not (len(original) == len(modified) == len(labels)):
        raise ValueError("prediction/label length mismatch")
    if not labels:
        raise DegenerateInputError("empty evaluation set")
    total = len(labels)
    oa = 100.0 * sum(1 for p, y in zip(original, labels) if p == y) / total
    ca = 100.0 * sum(1 for p, y in zip(modified, labels) if p == y) / total
    ra = 100.0 * sum(1 for a, b in zip(original, modified) if a != b) / total
    return oa, ca, ra
