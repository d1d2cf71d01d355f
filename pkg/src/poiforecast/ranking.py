"""Candidate POI ranking: category x proximity joint scores, and the direct-POI baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from ._order import descending_order
from .classifier import CategoryDistribution, softmax64
from .data import Poi, PoiSet
from .prior import ProximityPrior, distances_from


@dataclass(frozen=True)
class ForecastRanking:
    """Scores over a candidate set, with candidates in ascending ``poi_id`` order.

    ``order`` indexes ``candidate_ids`` by descending score; equal scores
    (up to rounding) keep ascending ``poi_id`` order.
    """

    user_id: str | None
    anchor_poi: str | None
    candidate_ids: tuple[str, ...]
    scores: np.ndarray
    normalized: bool
    order: np.ndarray

    @classmethod
    def from_scores(cls, candidate_ids: Sequence[str], scores: np.ndarray, *, user_id=None,
                    anchor_poi=None, normalize: bool = True) -> "ForecastRanking":
        scores = np.asarray(scores, dtype=np.float64)
        total = scores.sum()
        normalized = bool(normalize and total > 0)
        if normalized:
            scores = scores / total
        return cls(user_id, anchor_poi, tuple(candidate_ids), scores, normalized, descending_order(scores))

    @property
    def ranked_ids(self) -> list[str]:
        return [self.candidate_ids[i] for i in self.order]

    def score(self, poi_id: str) -> float:
        return float(self.scores[self.candidate_ids.index(poi_id)])

    def rank_of(self, poi_id: str) -> int | None:
        """0-based rank of ``poi_id``; None when it is not a candidate."""
        try:
            pos = self.candidate_ids.index(poi_id)
        except ValueError:
            return None
        return int(np.flatnonzero(self.order == pos)[0])


class BaselineHead(nn.Module):
    """Linear map from the context vector to one logit per training-vocabulary POI."""

    def __init__(self, hidden_dim: int, poi_ids: Sequence[str]):
        super().__init__()
        self.poi_ids = tuple(poi_ids)
        self.linear = nn.Linear(hidden_dim, len(self.poi_ids))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.linear(f)


def joint_scores(category_probs: np.ndarray, categories: tuple[str, ...], prior: ProximityPrior,
                 anchor: Poi, candidates: PoiSet) -> np.ndarray:
    """Unnormalised category-probability x proximity-prior score per candidate."""
    cat_pos = candidates.lookup_positions(categories, by_category=True)
    cat_p = np.where(cat_pos >= 0, np.asarray(category_probs, dtype=np.float64)[np.maximum(cat_pos, 0)], 0.0)
    prox = prior.probabilities[prior.bucketing.bucket(distances_from(anchor, candidates))]
    return cat_p * prox


def rank_joint(category_dist: CategoryDistribution, prior: ProximityPrior, anchor: Poi,
               candidates: PoiSet, user_id: str | None = None) -> ForecastRanking:
    if len(candidates) == 0:
        raise ValueError("empty candidate set")
    s = joint_scores(category_dist.probabilities, category_dist.categories, prior, anchor, candidates)
    return ForecastRanking.from_scores(candidates.ids, s, user_id=user_id, anchor_poi=anchor.poi_id)


def baseline_scores(poi_probs: np.ndarray, poi_ids: tuple[str, ...], candidates: PoiSet) -> np.ndarray:
    """Baseline probability per candidate; exactly 0 where the candidate has no logit."""
    pos = candidates.lookup_positions(poi_ids)
    return np.where(pos >= 0, np.asarray(poi_probs, dtype=np.float64)[np.maximum(pos, 0)], 0.0)


def rank_baseline(f: torch.Tensor, head: BaselineHead, candidates: PoiSet,
                  user_id: str | None = None, anchor_poi: str | None = None) -> ForecastRanking:
    """Softmax over the head's training-vocabulary logits, spread onto ``candidates``.

    Candidates outside the training vocabulary score exactly 0. When the
    candidate set omits some vocabulary POIs the remaining scores are
    renormalised.
    """
    if len(candidates) == 0:
        raise ValueError("empty candidate set")
    with torch.no_grad():
        logits = head(f.reshape(1, -1)).reshape(-1)
    probs = softmax64(logits.double().numpy())
    s = baseline_scores(probs, head.poi_ids, candidates)
    return ForecastRanking.from_scores(candidates.ids, s, user_id=user_id, anchor_poi=anchor_poi)


def top_k(ranking: ForecastRanking, k: int) -> list[str]:
    if k < 1:
        raise ValueError("k must be at least 1")
    return [ranking.candidate_ids[i] for i in ranking.order[:k]]
