"""Trained forecasters that turn prediction targets into candidate rankings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

from .classifier import (BASELINE, JOINT, CategoryDistribution, TrainConfig, TrainState, softmax64,
                         train)
from .data import DatasetSplit, PoiSet, Target
from .encoder import EncoderConfig
from .prior import DistanceBucketing, ProximityPrior, estimate_prior
from .ranking import ForecastRanking, baseline_scores, rank_joint

CHUNK = 512


@dataclass
class JointForecaster:
    """Category distribution from the classifier times the proximity prior."""

    state: TrainState
    prior: ProximityPrior
    name: str = JOINT

    def rankings(self, split: DatasetSplit, targets: Sequence[Target],
                 candidates: PoiSet) -> Iterator[tuple[Target, ForecastRanking]]:
        feats = self.state.featurizer
        items = feats.target_items(targets)
        for s in range(0, len(items), CHUNK):
            probs = softmax64(self.state.logits(items[s:s + CHUNK]).double().numpy())
            for t, p in zip(targets[s:s + CHUNK], probs):
                anchor = split.histories[t.user_id].visits[t.index - 1].poi_id
                dist = CategoryDistribution(p, feats.categories)
                yield t, rank_joint(dist, self.prior, feats.pois[anchor], candidates, user_id=t.user_id)


@dataclass
class BaselineForecaster:
    """Direct POI classifier: softmax over training-vocabulary POIs only."""

    state: TrainState
    name: str = BASELINE

    def rankings(self, split: DatasetSplit, targets: Sequence[Target],
                 candidates: PoiSet) -> Iterator[tuple[Target, ForecastRanking]]:
        feats = self.state.featurizer
        vocab = self.state.model.head.poi_ids
        items = feats.target_items(targets)
        for s in range(0, len(items), CHUNK):
            probs = softmax64(self.state.logits(items[s:s + CHUNK]).double().numpy())
            for t, p in zip(targets[s:s + CHUNK], probs):
                anchor = split.histories[t.user_id].visits[t.index - 1].poi_id
                yield t, ForecastRanking.from_scores(candidates.ids, baseline_scores(p, vocab, candidates),
                                                     user_id=t.user_id, anchor_poi=anchor)


def fit_forecaster(method: str, split: DatasetSplit, pois: PoiSet, *,
                   encoder_config: EncoderConfig | None = None, train_config: TrainConfig | None = None,
                   bucketing: DistanceBucketing | None = None, smoothing_alpha: float = 1.0,
                   seed: int = 0, metrics_path=None):
    state = train(split, pois, method, encoder_config, train_config, seed, metrics_path=metrics_path)
    if method == JOINT:
        return JointForecaster(state, estimate_prior(split.train, pois, bucketing, smoothing_alpha))
    return BaselineForecaster(state)


def category_accuracy(forecaster: JointForecaster, targets: Sequence[Target]) -> float:
    """Acc@1 of the category head alone on ``targets``."""
    return forecaster.state.validation_accuracy(targets)
