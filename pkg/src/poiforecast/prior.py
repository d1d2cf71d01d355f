"""Proximity prior: distribution of distances between consecutive visits."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import Poi, PoiSet, UserHistory
from .errors import ConfigError


def planar_distance(a: Poi, b: Poi) -> float:
    """Euclidean distance between two projected POIs, in kilometers."""
    return math.hypot(a.easting - b.easting, a.northing - b.northing) / 1000.0


def distances_from(anchor: Poi, pois: PoiSet) -> np.ndarray:
    """Planar distance (km) from ``anchor`` to every POI of ``pois``, in PoiSet order."""
    return np.hypot(pois.eastings - anchor.easting, pois.northings - anchor.northing) / 1000.0


@dataclass(frozen=True)
class DistanceBucketing:
    bucket_width: float = 0.5   # km
    max_distance: float = 30.0  # km

    def __post_init__(self):
        if not self.bucket_width > 0:
            raise ConfigError(f"bucket_width must be positive, got {self.bucket_width}")
        if not self.max_distance > 0:
            raise ConfigError(f"max_distance must be positive, got {self.max_distance}")

    @property
    def bucket_count(self) -> int:
        # regular buckets plus one overflow bucket
        return math.ceil(self.max_distance / self.bucket_width) + 1

    def bucket(self, distance_km):
        """Bucket index of a distance (scalar or array); clamps into the overflow bucket."""
        idx = np.floor(np.asarray(distance_km, dtype=float) / self.bucket_width)
        idx = np.clip(idx, 0, self.bucket_count - 1).astype(np.int64)
        return int(idx) if idx.ndim == 0 else idx

    def edges(self) -> list[tuple[float, float]]:
        """(lower, upper) km per bucket; the overflow bucket's upper edge is inf."""
        n = self.bucket_count
        w = self.bucket_width
        return [(i * w, (i + 1) * w if i < n - 1 else math.inf) for i in range(n)]


@dataclass(frozen=True)
class ProximityPrior:
    """Smoothed, normalised histogram over distance buckets.

    ``counts`` is the source of truth; probabilities are derived from it with
    additive (Laplace) smoothing.
    """

    bucketing: DistanceBucketing
    counts: tuple[int, ...]
    smoothing_alpha: float = 1.0

    def __post_init__(self):
        if len(self.counts) != self.bucketing.bucket_count:
            raise ValueError(f"expected {self.bucketing.bucket_count} counts, got {len(self.counts)}")
        if any(c < 0 for c in self.counts):
            raise ValueError("bucket counts must be non-negative")
        if self.smoothing_alpha < 0:
            raise ValueError("smoothing_alpha must be non-negative")
        total = sum(self.counts) + self.smoothing_alpha * len(self.counts)
        if total <= 0:
            raise ValueError("prior has no mass: zero counts and zero smoothing")
        probs = (np.asarray(self.counts, dtype=float) + self.smoothing_alpha) / total
        probs.setflags(write=False)
        object.__setattr__(self, "_probs", probs)

    @property
    def probabilities(self) -> np.ndarray:
        return self._probs

    @property
    def total_pairs(self) -> int:
        return int(sum(self.counts))

    def probability_of_distance(self, distance_km):
        return self._probs[self.bucketing.bucket(distance_km)]

    def merge(self, other: "ProximityPrior") -> "ProximityPrior":
        if other.bucketing != self.bucketing or other.smoothing_alpha != self.smoothing_alpha:
            raise ValueError("can only merge priors with identical bucketing and smoothing")
        return ProximityPrior(self.bucketing, tuple(a + b for a, b in zip(self.counts, other.counts)),
                              self.smoothing_alpha)

    def to_json(self) -> dict:
        return {
            "bucket_width_km": self.bucketing.bucket_width,
            "max_distance_km": self.bucketing.max_distance,
            "smoothing_alpha": self.smoothing_alpha,
            "counts": list(self.counts),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ProximityPrior":
        bucketing = DistanceBucketing(float(obj["bucket_width_km"]), float(obj["max_distance_km"]))
        return cls(bucketing, tuple(int(c) for c in obj["counts"]), float(obj["smoothing_alpha"]))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ProximityPrior":
        return cls.from_json(json.loads(Path(path).read_text()))

    def write_histogram_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bucket_lower_km", "bucket_upper_km", "count"])
            for (lo, hi), c in zip(self.bucketing.edges(), self.counts):
                w.writerow([f"{lo:g}", "inf" if math.isinf(hi) else f"{hi:g}", c])


def count_pairs(histories: Iterable[UserHistory], pois: PoiSet,
                bucketing: DistanceBucketing) -> np.ndarray:
    """Bucket counts of consecutive same-user visit distances."""
    counts = np.zeros(bucketing.bucket_count, dtype=np.int64)
    for h in histories:
        if len(h.visits) < 2:
            continue
        pos = np.fromiter((pois.position(v.poi_id) for v in h.visits), dtype=np.int64)
        d = np.hypot(np.diff(pois.eastings[pos]), np.diff(pois.northings[pos])) / 1000.0
        counts += np.bincount(bucketing.bucket(d), minlength=bucketing.bucket_count)
    return counts


def estimate_prior(train: Iterable[UserHistory], pois: PoiSet,
                   bucketing: DistanceBucketing | None = None,
                   smoothing_alpha: float = 1.0) -> ProximityPrior:
    """Estimate the proximity prior from training histories.

    Pairs never cross users. Raises ConfigError when there is no consecutive
    pair at all.
    """
    bucketing = bucketing or DistanceBucketing()
    counts = count_pairs(train, pois, bucketing)
    if counts.sum() == 0:
        raise ConfigError("no consecutive visit pairs in training data; proximity prior undefined")
    return ProximityPrior(bucketing, tuple(int(c) for c in counts), smoothing_alpha)


def prior_probability(prior: ProximityPrior, anchor: Poi, candidate: Poi) -> float:
    """Prior mass of the bucket that ``candidate``'s distance from ``anchor`` falls in."""
    return float(prior.probability_of_distance(planar_distance(anchor, candidate)))
