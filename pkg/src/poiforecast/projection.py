"""UTM projection helpers.

All POIs of one run are projected into a single UTM zone picked from the
dataset centroid, so planar Euclidean distance stands in for geodesic
distance inside the study region.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

from pyproj import Transformer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UtmZone:
    number: int
    north: bool

    def __post_init__(self):
        if not 1 <= self.number <= 60:
            raise ValueError(f"UTM zone number out of range: {self.number}")

    @property
    def epsg(self) -> int:
        return (32600 if self.north else 32700) + self.number

    @property
    def central_meridian(self) -> float:
        return -183.0 + 6.0 * self.number

    def contains(self, lat: float, lon: float) -> bool:
        """True when (lat, lon) lies inside the zone's 6-degree band and hemisphere."""
        west = self.central_meridian - 3.0
        in_band = west <= lon <= west + 6.0
        return in_band and ((lat >= 0) == self.north or lat == 0)

    def __str__(self) -> str:
        return f"{self.number}{'N' if self.north else 'S'}"

    @classmethod
    def parse(cls, text: str) -> "UtmZone":
        text = text.strip().upper()
        if not text or text[-1] not in "NS":
            raise ValueError(f"zone must look like '18N', got {text!r}")
        return cls(int(text[:-1]), text[-1] == "N")


def zone_for(lat: float, lon: float) -> UtmZone:
    """Standard zone arithmetic from longitude; hemisphere from latitude."""
    _check_coords(lat, lon)
    number = int(math.floor((lon + 180.0) / 6.0)) % 60 + 1
    return UtmZone(number, lat >= 0)


def centroid_zone(coords) -> UtmZone:
    """Zone of the mean (lat, lon) of an iterable of coordinate pairs."""
    coords = list(coords)
    if not coords:
        raise ValueError("cannot pick a zone for an empty coordinate set")
    lat = sum(c[0] for c in coords) / len(coords)
    lon = sum(c[1] for c in coords) / len(coords)
    return zone_for(lat, lon)


@lru_cache(maxsize=16)
def _forward(epsg: int) -> Transformer:
    return Transformer.from_crs("EPSG:4326", f"EPSG:{epsg}", always_xy=True)


@lru_cache(maxsize=16)
def _inverse(epsg: int) -> Transformer:
    return Transformer.from_crs(f"EPSG:{epsg}", "EPSG:4326", always_xy=True)


def _check_coords(lat: float, lon: float) -> None:
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        raise ValueError(f"invalid coordinates ({lat}, {lon})")


def project_to_plane(lat: float, lon: float, zone: UtmZone | None = None) -> tuple[float, float]:
    """Project WGS84 degrees to (easting, northing) in meters.

    Without an explicit ``zone`` the point's own zone is used. Points outside
    the given zone are still projected (single-zone assumption) but a warning
    is logged.
    """
    _check_coords(lat, lon)
    if zone is None:
        zone = zone_for(lat, lon)
    elif not zone.contains(lat, lon):
        log.warning("(%.5f, %.5f) lies outside UTM zone %s; projecting anyway", lat, lon, zone)
    easting, northing = _forward(zone.epsg).transform(lon, lat)
    return float(easting), float(northing)


def project_many(lats, lons, zone: UtmZone):
    """Vectorised projection; returns (eastings, northings) arrays."""
    import numpy as np

    lats = np.asarray(lats, dtype=float)
    lons = np.asarray(lons, dtype=float)
    outside = sum(1 for la, lo in zip(lats, lons) if not zone.contains(la, lo))
    if outside:
        log.warning("%d points lie outside UTM zone %s; projecting anyway", outside, zone)
    # lists, not arrays: pyproj treats a size-1 array as a scalar point
    e, n = _forward(zone.epsg).transform(lons.tolist(), lats.tolist())
    return np.asarray(e, dtype=float), np.asarray(n, dtype=float)


def unproject(easting: float, northing: float, zone: UtmZone) -> tuple[float, float]:
    """Inverse of :func:`project_to_plane`; returns (lat, lon)."""
    lon, lat = _inverse(zone.epsg).transform(easting, northing)
    return float(lat), float(lon)
