"""Check-in data model, ingestion and temporal train/validation/test splitting."""

from __future__ import annotations

import json
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Mapping, TextIO

import numpy as np

from .errors import ConfigError, IngestError
from .projection import UtmZone, centroid_zone, project_many

log = logging.getLogger(__name__)

# a target needs this many earlier visits: one anchors the distance, one more gives context
MIN_TARGET_PREFIX = 2


@dataclass(frozen=True)
class Poi:
    poi_id: str
    lat: float
    lon: float
    category_id: str
    easting: float = 0.0
    northing: float = 0.0

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0 and -180.0 <= self.lon <= 180.0):
            raise ValueError(f"POI {self.poi_id}: invalid coordinates ({self.lat}, {self.lon})")


class PoiSet:
    """Immutable collection of projected POIs, ordered by ``poi_id``.

    ``category_vocabulary`` lists every category present, sorted.
    """

    def __init__(self, pois: Iterable[Poi], zone: UtmZone | None = None):
        ordered = sorted(pois, key=lambda p: p.poi_id)
        self._pois = tuple(ordered)
        self._index = {p.poi_id: i for i, p in enumerate(self._pois)}
        if len(self._index) != len(self._pois):
            raise ValueError("duplicate poi_id in PoiSet")
        self.zone = zone
        self.category_vocabulary = tuple(sorted({p.category_id for p in self._pois}))
        self.eastings = np.array([p.easting for p in self._pois], dtype=float)
        self.northings = np.array([p.northing for p in self._pois], dtype=float)
        self._lookup_cache: dict = {}

    @classmethod
    def from_coordinates(cls, records: Iterable[tuple[str, float, float, str]],
                         zone: UtmZone | None = None) -> "PoiSet":
        """Build from ``(poi_id, lat, lon, category_id)`` records, projecting them.

        The zone defaults to the one containing the records' centroid.
        """
        records = list(records)
        if not records:
            return cls([], zone)
        if zone is None:
            zone = centroid_zone((r[1], r[2]) for r in records)
        east, north = project_many([r[1] for r in records], [r[2] for r in records], zone)
        pois = [Poi(pid, lat, lon, cat, float(e), float(n))
                for (pid, lat, lon, cat), e, n in zip(records, east, north)]
        return cls(pois, zone)

    def __len__(self) -> int:
        return len(self._pois)

    def __iter__(self) -> Iterator[Poi]:
        return iter(self._pois)

    def __contains__(self, poi_id) -> bool:
        return poi_id in self._index

    def __getitem__(self, poi_id: str) -> Poi:
        return self._pois[self._index[poi_id]]

    def __eq__(self, other) -> bool:
        return isinstance(other, PoiSet) and self._pois == other._pois and self.zone == other.zone

    def __repr__(self) -> str:
        return f"PoiSet({len(self)} POIs, {len(self.category_vocabulary)} categories, zone={self.zone})"

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(p.poi_id for p in self._pois)

    def position(self, poi_id: str) -> int:
        return self._index[poi_id]

    def lookup_positions(self, tokens: tuple[str, ...], by_category: bool = False) -> np.ndarray:
        """Position of each POI's id (or category) within ``tokens``, -1 if absent. Cached."""
        key = (tokens, by_category)
        cached = self._lookup_cache.get(key)
        if cached is None:
            where = {t: i for i, t in enumerate(tokens)}
            cached = np.array([where.get(p.category_id if by_category else p.poi_id, -1) for p in self._pois],
                              dtype=np.int64)
            self._lookup_cache[key] = cached
        return cached

    def subset(self, poi_ids: Iterable[str]) -> "PoiSet":
        return PoiSet((self[pid] for pid in set(poi_ids)), self.zone)


@dataclass(frozen=True)
class Visit:
    user_id: str
    timestamp: int  # UTC seconds
    poi_id: str
    tz_offset_min: int = 0

    @property
    def hour_of_week(self) -> int:
        """Local hour of the week, Monday 00:00 = 0."""
        local = datetime.fromtimestamp(self.timestamp + 60 * self.tz_offset_min, timezone.utc)
        return local.weekday() * 24 + local.hour


@dataclass(frozen=True)
class UserHistory:
    user_id: str
    visits: tuple[Visit, ...]

    def __post_init__(self):
        if not self.visits:
            raise ValueError(f"history of user {self.user_id} is empty")
        if any(v.user_id != self.user_id for v in self.visits):
            raise ValueError(f"history of user {self.user_id} contains foreign visits")
        ts = [v.timestamp for v in self.visits]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"history of user {self.user_id} is not time-ordered")

    def __len__(self) -> int:
        return len(self.visits)


@dataclass(frozen=True, order=True)
class Target:
    """Prediction target: visit ``index`` (0-based) of ``user_id``'s full history."""

    user_id: str
    index: int


@dataclass(frozen=True)
class DatasetSplit:
    """Temporal split.

    ``train`` holds the pre-threshold part of every history. ``validation`` and
    ``test`` hold post-threshold targets; their observation windows are read
    from ``histories`` and may reach back across the threshold.
    """

    histories: Mapping[str, UserHistory]
    threshold: int
    seed: int
    train: tuple[UserHistory, ...]
    validation: tuple[Target, ...]
    test: tuple[Target, ...]
    unseen_poi_ids: frozenset[str]
    post_threshold_poi_ids: frozenset[str] = field(default=frozenset())

    def visit(self, target: Target) -> Visit:
        return self.histories[target.user_id].visits[target.index]

    @property
    def train_poi_ids(self) -> frozenset[str]:
        return frozenset(v.poi_id for h in self.train for v in h.visits)

    @property
    def unseen_ratio(self) -> float:
        """Fraction of post-threshold POIs never visited in training."""
        if not self.post_threshold_poi_ids:
            return 0.0
        return len(self.unseen_poi_ids) / len(self.post_threshold_poi_ids)

    def is_unseen(self, target: Target) -> bool:
        return self.visit(target).poi_id in self.unseen_poi_ids


@dataclass
class IngestStats:
    lines: int = 0
    visits: int = 0
    malformed: int = 0
    malformed_samples: list[str] = field(default_factory=list)

    @property
    def malformed_fraction(self) -> float:
        return self.malformed / self.lines if self.lines else 0.0


@dataclass(frozen=True)
class CheckinFormat:
    """Column layout of a delimited check-in file (0-based indices)."""

    delimiter: str = "\t"
    n_columns: int = 8
    user: int = 0
    venue: int = 1
    category: int = 2
    lat: int = 4
    lon: int = 5
    tz_offset: int = 6
    time: int = 7
    time_format: str = "%a %b %d %H:%M:%S %z %Y"


FOURSQUARE_TSV = CheckinFormat()


def _parse_line(line: str, fmt: CheckinFormat):
    cols = line.rstrip("\r\n").split(fmt.delimiter)
    if len(cols) != fmt.n_columns:
        raise ValueError(f"expected {fmt.n_columns} columns, got {len(cols)}")
    user, venue, cat = cols[fmt.user], cols[fmt.venue], cols[fmt.category]
    if not (user and venue and cat):
        raise ValueError("empty identifier")
    lat, lon = float(cols[fmt.lat]), float(cols[fmt.lon])
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        raise ValueError("coordinates out of range")
    offset = int(float(cols[fmt.tz_offset]))
    ts = int(datetime.strptime(cols[fmt.time], fmt.time_format).timestamp())
    return user, venue, cat, lat, lon, offset, ts


def parse_checkins(source: str | os.PathLike | TextIO, fmt: CheckinFormat = FOURSQUARE_TSV,
                   *, zone: UtmZone | None = None, max_malformed_fraction: float = 0.10,
                   ) -> tuple[PoiSet, list[UserHistory], IngestStats]:
    """Parse a check-in file into a projected PoiSet and per-user histories.

    A venue seen with several coordinates keeps its first occurrence. Malformed
    lines are skipped and counted; above ``max_malformed_fraction`` the whole
    ingest fails. Histories are sorted by timestamp (stable in file order) and
    returned ordered by user id.
    """
    if isinstance(source, (str, os.PathLike)):
        try:
            stream = open(source, encoding="utf-8", errors="replace", newline="")
        except OSError as exc:
            raise IngestError(f"cannot read check-in file {source}: {exc}") from exc
        with stream:
            return parse_checkins(stream, fmt, zone=zone, max_malformed_fraction=max_malformed_fraction)

    stats = IngestStats()
    poi_records: dict[str, tuple[str, float, float, str]] = {}
    by_user: dict[str, list[Visit]] = defaultdict(list)
    try:
        for line in source:
            if not line.strip():
                continue
            stats.lines += 1
            try:
                user, venue, cat, lat, lon, offset, ts = _parse_line(line, fmt)
            except ValueError:
                stats.malformed += 1
                if len(stats.malformed_samples) < 5:
                    stats.malformed_samples.append(line.rstrip("\r\n")[:200])
                continue
            poi_records.setdefault(venue, (venue, lat, lon, cat))
            by_user[user].append(Visit(user, ts, venue, offset))
            stats.visits += 1
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestError(f"check-in stream unreadable: {exc}") from exc

    if stats.malformed:
        log.warning("skipped %d malformed lines of %d", stats.malformed, stats.lines)
    if stats.malformed_fraction > max_malformed_fraction:
        raise IngestError(
            f"{stats.malformed} of {stats.lines} lines malformed "
            f"({stats.malformed_fraction:.1%}); samples: {stats.malformed_samples}")

    pois = PoiSet.from_coordinates(poi_records.values(), zone)
    histories = [UserHistory(u, tuple(sorted(vs, key=lambda v: v.timestamp)))
                 for u, vs in sorted(by_user.items())]
    return pois, histories, stats


def write_checkins(pois: PoiSet, histories: Iterable[UserHistory], stream: TextIO,
                   category_names: Mapping[str, str] | None = None) -> None:
    """Write histories in the eight-column tab-separated check-in layout."""
    rows = [v for h in histories for v in h.visits]
    rows.sort(key=lambda v: (v.timestamp, v.user_id))
    for v in rows:
        p = pois[v.poi_id]
        name = (category_names or {}).get(p.category_id, p.category_id)
        when = datetime.fromtimestamp(v.timestamp, timezone.utc).strftime("%a %b %d %H:%M:%S +0000 %Y")
        stream.write("\t".join([v.user_id, p.poi_id, p.category_id, name, repr(p.lat), repr(p.lon),
                                str(v.tz_offset_min), when]) + "\n")


# --- splitting -----------------------------------------------------------

def _as_mapping(histories) -> dict[str, UserHistory]:
    if isinstance(histories, Mapping):
        return dict(histories)
    return {h.user_id: h for h in histories}


def temporal_split(histories: Iterable[UserHistory] | Mapping[str, UserHistory], threshold: int,
                   seed: int, min_prefix: int = MIN_TARGET_PREFIX) -> DatasetSplit:
    """Split at ``threshold``: earlier visits train, later visits become targets.

    Every post-threshold visit with at least ``min_prefix`` earlier visits of
    the same user is a target; targets are shuffled with ``seed`` and halved
    between validation and test.
    """
    by_user = _as_mapping(histories)
    train, targets, post_pois = [], [], set()
    for uid in sorted(by_user):
        h = by_user[uid]
        pre = tuple(v for v in h.visits if v.timestamp < threshold)
        if pre:
            train.append(UserHistory(uid, pre))
        for j, v in enumerate(h.visits):
            if v.timestamp >= threshold:
                post_pois.add(v.poi_id)
                if j >= min_prefix:
                    targets.append(Target(uid, j))
    if not train:
        raise ConfigError(f"threshold {threshold} leaves the training partition empty")
    if len(targets) < 2:
        raise ConfigError(f"threshold {threshold} leaves the test partition empty")

    perm = np.random.default_rng(seed).permutation(len(targets))
    half = len(targets) // 2
    validation = tuple(sorted(targets[i] for i in perm[:half]))
    test = tuple(sorted(targets[i] for i in perm[half:]))
    train_pois = {v.poi_id for h in train for v in h.visits}
    return DatasetSplit(
        histories=by_user, threshold=int(threshold), seed=int(seed), train=tuple(train),
        validation=validation, test=test,
        unseen_poi_ids=frozenset(post_pois - train_pois),
        post_threshold_poi_ids=frozenset(post_pois),
    )


def unseen_ratio_curve(histories) -> tuple[np.ndarray, np.ndarray]:
    """Unseen ratio at every interior candidate threshold.

    Candidate thresholds are the distinct visit timestamps except the
    earliest. At threshold t a POI is post-threshold when its last visit is
    >= t and unseen when its first visit is >= t.
    """
    first: dict[str, int] = {}
    last: dict[str, int] = {}
    times = []
    for h in _as_mapping(histories).values():
        for v in h.visits:
            times.append(v.timestamp)
            first[v.poi_id] = min(first.get(v.poi_id, v.timestamp), v.timestamp)
            last[v.poi_id] = max(last.get(v.poi_id, v.timestamp), v.timestamp)
    candidates = np.unique(np.asarray(times, dtype=np.int64))[1:]
    if candidates.size == 0:
        return candidates, np.zeros(0)
    f = np.sort(np.fromiter(first.values(), dtype=np.int64))
    la = np.sort(np.fromiter(last.values(), dtype=np.int64))
    n_unseen = f.size - np.searchsorted(f, candidates, side="left")
    n_post = la.size - np.searchsorted(la, candidates, side="left")
    return candidates, n_unseen / n_post


def find_threshold_for_unseen_ratio(histories, target_ratio: float,
                                    tolerance: float = 0.05) -> tuple[int, float]:
    """Threshold whose realized unseen ratio is closest to ``target_ratio``.

    Scans every candidate timestamp (the ratio curve is cheap to evaluate in
    full with sorted first/last-visit times). Ties go to the latest
    threshold, which keeps the most training data. Returns
    ``(threshold, realized_ratio)``.
    """
    if not 0.0 < target_ratio < 1.0:
        raise ConfigError(f"target unseen ratio must lie in (0, 1), got {target_ratio}")
    thresholds, ratios = unseen_ratio_curve(histories)
    if thresholds.size == 0:
        raise ConfigError("need at least two distinct timestamps to place a threshold")
    gap = np.abs(ratios - target_ratio)
    best = thresholds.size - 1 - int(np.argmin(gap[::-1]))
    if gap[best] > tolerance:
        raise ConfigError(
            f"no threshold reaches unseen ratio {target_ratio:.3f} within ±{tolerance:.2f}; "
            f"achievable range [{ratios.min():.3f}, {ratios.max():.3f}]")
    return int(thresholds[best]), float(ratios[best])


# --- persistence -----------------------------------------------------------

def split_manifest(split: DatasetSplit) -> dict:
    assignments = []
    for part, targets in (("validation", split.validation), ("test", split.test)):
        for t in targets:
            v = split.visit(t)
            assignments.append({"user_id": t.user_id, "index": t.index, "timestamp": v.timestamp,
                                "poi_id": v.poi_id, "partition": part})
    assignments.sort(key=lambda a: (a["user_id"], a["index"]))
    return {
        "threshold": split.threshold,
        "seed": split.seed,
        "unseen_ratio": split.unseen_ratio,
        "unseen_poi_ids": sorted(split.unseen_poi_ids),
        "post_threshold_poi_ids": sorted(split.post_threshold_poi_ids),
        "assignments": assignments,
    }


def write_json(obj, path: str | os.PathLike) -> None:
    """Deterministic JSON (sorted keys, fixed indentation, trailing newline)."""
    text = json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def save_split(split: DatasetSplit, path: str | os.PathLike) -> None:
    write_json(split_manifest(split), path)


def load_split(path_or_manifest, histories) -> DatasetSplit:
    """Rebuild a split from its manifest and the histories it was made from.

    Raises IngestError if the manifest's targets no longer match the data.
    """
    if isinstance(path_or_manifest, dict):
        m = path_or_manifest
    else:
        m = json.loads(Path(path_or_manifest).read_text(encoding="utf-8"))
    by_user = _as_mapping(histories)
    threshold = int(m["threshold"])
    train = []
    for uid in sorted(by_user):
        pre = tuple(v for v in by_user[uid].visits if v.timestamp < threshold)
        if pre:
            train.append(UserHistory(uid, pre))
    parts: dict[str, list[Target]] = {"validation": [], "test": []}
    for a in m["assignments"]:
        t = Target(a["user_id"], int(a["index"]))
        h = by_user.get(t.user_id)
        if h is None or t.index >= len(h) or h.visits[t.index].poi_id != a["poi_id"] \
                or h.visits[t.index].timestamp != a["timestamp"]:
            raise IngestError(f"manifest target {t} does not match the check-in data")
        parts[a["partition"]].append(t)
    return DatasetSplit(
        histories=by_user, threshold=threshold, seed=int(m["seed"]), train=tuple(train),
        validation=tuple(sorted(parts["validation"])), test=tuple(sorted(parts["test"])),
        unseen_poi_ids=frozenset(m["unseen_poi_ids"]),
        post_threshold_poi_ids=frozenset(m.get("post_threshold_poi_ids", ())),
    )
