"""Geodesic math, track segmentation, and aerial-tile geometry.

A raw GPS track is cut greedily into short runs that each fit inside one
aerial tile: walk forward from a head frame while the great-circle
distance to the head stays below a threshold, emit the run, and restart
from the frame halfway through it (consecutive runs overlap). Each run
is then paired with a tile centered on the mean location, optionally
nudged by a small random shift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# mean Earth radius, meters (IUGG R1)
EARTH_RADIUS_M = 6_371_008.8

# Web-Mercator equatorial resolution at zoom 0 for 256px tiles, m/px
_MERCATOR_ZOOM0_RES = 156_543.03392

# Mercator projection is undefined poleward of this latitude
MERCATOR_LAT_LIMIT = 85.05113


@dataclass(frozen=True)
class GeoFrame:
    """One ground capture point of a track."""

    id: str
    lat: float
    lon: float
    heading: float
    image_path: Optional[str] = None

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"frame {self.id!r}: lat {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"frame {self.id!r}: lon {self.lon} outside [-180, 180]")
        if not 0.0 <= self.heading < 360.0:
            raise ValueError(f"frame {self.id!r}: heading {self.heading} outside [0, 360)")


@dataclass(frozen=True)
class AerialTile:
    """Square aerial image footprint: center, zoom, and pixel size.

    center_lat/center_lon already include the random shift;
    shift_east_m/shift_north_m record the offset that was applied.
    """

    center_lat: float
    center_lon: float
    zoom: int = 20
    pixels: int = 640
    shift_east_m: float = 0.0
    shift_north_m: float = 0.0

    def __post_init__(self):
        if self.zoom < 0:
            raise ValueError(f"zoom must be >= 0, got {self.zoom}")
        if self.pixels <= 0:
            raise ValueError(f"pixels must be > 0, got {self.pixels}")

    def span_m(self) -> float:
        """Ground extent of one tile side, meters."""
        return self.pixels * ground_resolution(self.zoom, self.center_lat)


@dataclass
class SequenceRecord:
    """An ordered run of frames paired with (at most) one aerial tile."""

    seq_id: str
    frames: list[GeoFrame]
    tile: Optional[AerialTile] = None

    def frame_ids(self) -> list[str]:
        return [f.id for f in self.frames]


def haversine_distance(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in meters on the mean-radius sphere."""
    phi1 = math.radians(lat1)
    phi2 = math.radians(lat2)
    dphi = math.radians(lat2 - lat1)
    dlam = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(math.sqrt(a))


def segment_track(track: list[GeoFrame], delta: float = 50.0,
                  min_len: int = 7) -> list[SequenceRecord]:
    """Greedily split `track` into runs whose frames all lie within
    `delta` meters of the run's first frame.

    The scan advances while the head-to-frame distance stays below
    `delta`; the first violation closes the run and the next head is the
    frame halfway between the old head and the run's last frame (floor
    on the index mean), so consecutive runs share their back half. Runs
    shorter than `min_len` are dropped, including a trailing partial run
    at end of track. Tiles are left unset.
    """
    if delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    if min_len < 1:
        raise ValueError(f"min_len must be >= 1, got {min_len}")
    records: list[SequenceRecord] = []
    n = len(track)
    head = 0
    counter = 0
    while head < n:
        last = head
        while last + 1 < n and haversine_distance(
                track[head].lat, track[head].lon,
                track[last + 1].lat, track[last + 1].lon) < delta:
            last += 1
        frames = track[head:last + 1]
        if len(frames) >= min_len:
            records.append(SequenceRecord(seq_id=f"seq_{counter:06d}", frames=frames))
            counter += 1
        if last + 1 >= n:
            break
        # midpoint restart; force one step forward so length<=2 runs
        # cannot stall the scan
        head = max((head + last) // 2, head + 1)
    return records


def tile_center(frames: list[GeoFrame]) -> tuple[float, float]:
    """Arithmetic-mean location of the frames (valid for sub-tile extents)."""
    if not frames:
        raise ValueError("empty sequence")
    lat = sum(f.lat for f in frames) / len(frames)
    lon = sum(f.lon for f in frames) / len(frames)
    return lat, lon


def apply_random_shift(center: tuple[float, float], max_shift: float = 5.0,
                       rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Sample (east_m, north_m) uniformly on the disk of radius `max_shift`."""
    if max_shift < 0:
        raise ValueError(f"max_shift must be >= 0, got {max_shift}")
    if rng is None:
        raise ValueError("apply_random_shift requires a seeded generator")
    theta = rng.uniform(0.0, 2.0 * math.pi)
    r = max_shift * math.sqrt(rng.uniform(0.0, 1.0))
    return r * math.cos(theta), r * math.sin(theta)


def ground_resolution(zoom: int, lat: float) -> float:
    """Web-Mercator ground resolution in meters per pixel."""
    if zoom < 0:
        raise ValueError(f"zoom must be >= 0, got {zoom}")
    if abs(lat) >= MERCATOR_LAT_LIMIT:
        raise ValueError(f"latitude {lat} outside Mercator band "
                         f"(|lat| < {MERCATOR_LAT_LIMIT})")
    return _MERCATOR_ZOOM0_RES * math.cos(math.radians(lat)) / (2 ** zoom)


def offset_latlon(lat: float, lon: float, east_m: float,
                  north_m: float) -> tuple[float, float]:
    """Move a point by local east/north meters (equirectangular approximation)."""
    dlat = math.degrees(north_m / EARTH_RADIUS_M)
    dlon = math.degrees(east_m / (EARTH_RADIUS_M * math.cos(math.radians(lat))))
    return lat + dlat, lon + dlon


def frame_in_tile(frame: GeoFrame, tile: AerialTile) -> tuple[bool, float, float]:
    """Project a frame into tile pixel coordinates (x right, y down).

    Returns (inside, px, py); inside means both coordinates fall in
    [0, pixels). Uses a local equirectangular projection around the tile
    center, which is accurate to millimeters over tile-sized extents.
    """
    res = ground_resolution(tile.zoom, tile.center_lat)
    east_m = (math.radians(frame.lon - tile.center_lon)
              * EARTH_RADIUS_M * math.cos(math.radians(tile.center_lat)))
    north_m = math.radians(frame.lat - tile.center_lat) * EARTH_RADIUS_M
    px = tile.pixels / 2.0 + east_m / res
    py = tile.pixels / 2.0 - north_m / res
    inside = 0.0 <= px < tile.pixels and 0.0 <= py < tile.pixels
    return inside, px, py


def make_tile(frames: list[GeoFrame], zoom: int = 20, pixels: int = 640,
              max_shift: float = 5.0,
              rng: np.random.Generator | None = None) -> AerialTile:
    """Build the tile for a frame run: mean center plus a random shift."""
    lat, lon = tile_center(frames)
    if max_shift > 0:
        east, north = apply_random_shift((lat, lon), max_shift, rng)
    else:
        east, north = 0.0, 0.0
    center_lat, center_lon = offset_latlon(lat, lon, east, north)
    return AerialTile(center_lat=center_lat, center_lon=center_lon,
                      zoom=zoom, pixels=pixels,
                      shift_east_m=east, shift_north_m=north)
