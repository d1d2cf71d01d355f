"""Synthetic check-in world with a known category process.

POIs sit in well-separated neighbourhood clusters, one POI per category per
cluster. Each user lives in one cluster; the category of the next visit
follows a fixed Markov chain and the visited POI is the nearest POI of that
category, i.e. the cluster's own one. At ``swap_time`` a fraction of POIs is
replaced by new POIs with the same category and location (a closure plus an
opening), which become the unseen POIs of a split at that time.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .data import Poi, PoiSet, UserHistory, Visit, write_checkins
from .projection import project_to_plane, unproject, zone_for

EPOCH = int(datetime(2012, 4, 2, tzinfo=timezone.utc).timestamp())
DAY = 86400


def markov_transition(n_categories: int, dominant: float, rng: np.random.Generator) -> np.ndarray:
    """Each row puts ``dominant`` on one successor (a random cyclic order) and spreads the rest."""
    order = rng.permutation(n_categories)
    t = np.full((n_categories, n_categories), (1.0 - dominant) / (n_categories - 1))
    for i in range(n_categories):
        t[order[i], order[(i + 1) % n_categories]] = dominant
    return t


def stationary(t: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eig(t.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    return pi / pi.sum()


@dataclass
class SyntheticWorld:
    pois: PoiSet
    histories: list[UserHistory]
    swap_time: int
    active_after_swap: PoiSet
    transition: np.ndarray
    categories: tuple[str, ...]
    replaced: dict[str, str]

    def bayes_rate(self) -> float:
        """Best achievable next-category Acc@1: sum_c pi(c) max_c' T[c, c']."""
        return float(stationary(self.transition) @ self.transition.max(axis=1))

    def write_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            write_checkins(self.pois, self.histories, fh)


def generate_world(*, n_clusters: int = 8, n_categories: int = 6, n_users: int = 48,
                   visits_per_user: int = 60, swap_fraction: float = 0.5, swap_quantile: float = 0.7,
                   dominant: float = 0.85, spacing_km: float = 6.0, radius_km: float = 0.8,
                   days: int = 100, center: tuple[float, float] = (40.73, -73.99),
                   seed: int = 0) -> SyntheticWorld:
    if not 0.0 <= swap_fraction <= 1.0:
        raise ValueError("swap_fraction must lie in [0, 1]")
    if 2 * radius_km >= spacing_km / 2:
        raise ValueError("clusters overlap; nearest-of-category would leave the home cluster")
    rng = np.random.default_rng(seed)
    zone = zone_for(*center)
    ce, cn = project_to_plane(*center, zone)
    categories = tuple(f"cat{c}" for c in range(n_categories))
    transition = markov_transition(n_categories, dominant, rng)

    side = int(np.ceil(np.sqrt(n_clusters)))
    records = {}  # (cluster, category) -> (poi_id, lat, lon)
    for cl in range(n_clusters):
        gx, gy = cl % side, cl // side
        x0 = ce + (gx - (side - 1) / 2) * spacing_km * 1000
        y0 = cn + (gy - (side - 1) / 2) * spacing_km * 1000
        for c in range(n_categories):
            r = radius_km * 1000 * np.sqrt(rng.uniform())
            a = rng.uniform(0, 2 * np.pi)
            lat, lon = unproject(x0 + r * np.cos(a), y0 + r * np.sin(a), zone)
            records[cl, c] = (f"c{cl:02d}k{c}", round(lat, 7), round(lon, 7))

    keys = sorted(records)
    n_swap = int(round(swap_fraction * len(keys)))
    swapped = {keys[i] for i in rng.choice(len(keys), size=n_swap, replace=False)}
    replaced = {records[k][0]: records[k][0] + "n" for k in sorted(swapped)}

    raw_times = [np.sort(rng.uniform(0, days * DAY, size=visits_per_user)).astype(np.int64) + EPOCH
                 for _ in range(n_users)]
    swap_time = int(np.quantile(np.concatenate(raw_times), swap_quantile))

    histories = []
    for u in range(n_users):
        uid = f"u{u:03d}"
        home = u % n_clusters
        cat = int(rng.integers(n_categories))
        visits = []
        for ts in raw_times[u]:
            pid = records[home, cat][0]
            if ts >= swap_time and pid in replaced:
                pid = replaced[pid]
            visits.append(Visit(uid, int(ts), pid, -240))
            cat = int(rng.choice(n_categories, p=transition[cat]))
        histories.append(UserHistory(uid, tuple(visits)))

    poi_records = []
    for (cl, c), (pid, lat, lon) in records.items():
        poi_records.append((pid, lat, lon, categories[c]))
        if pid in replaced:
            poi_records.append((replaced[pid], lat, lon, categories[c]))
    pois = PoiSet.from_coordinates(poi_records, zone)
    active = PoiSet([p for p in pois if p.poi_id not in replaced], zone)
    return SyntheticWorld(pois, histories, swap_time, active, transition, categories, replaced)


def nearest_of_category(pois: PoiSet, anchor: Poi, category: str) -> str:
    """Closest POI of ``category`` to ``anchor`` (ties by poi_id); the generator's visit rule."""
    best = min((p for p in pois if p.category_id == category),
               key=lambda p: (np.hypot(p.easting - anchor.easting, p.northing - anchor.northing), p.poi_id))
    return best.poi_id
