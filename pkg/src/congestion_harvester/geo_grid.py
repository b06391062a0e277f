"""Tile-array geometry on the equirectangular-at-the-center model.

Ground pixel size at zoom ``z`` and latitude ``lat`` is ``dx24 * 2**(24-z) * cos(lat)``.
A tile of ``n_pix`` pixels spans a fixed longitude increment (independent of
latitude) and a latitude increment scaled by ``cos(lat_c)`` of the grid center.
Tiles are indexed ``i = 1..n_lat`` south to north and ``j = 1..n_long`` west to
east, so ``(1, 1)`` is the southwest corner.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

EQUATORIAL_RADIUS_M = 6_378_137.0
# dx_Equator as hard-coded in the original download script; kept for
# reproducing that script's output. It disagrees with 2*pi*R / 2**32 in the
# fourth significant digit.
SCRIPT_BASE_PIXEL_M = 0.0093330692

MAX_ZOOM = 24
MAX_ABS_LAT = 85.0


class GeometryError(ValueError):
    """Out-of-domain geometric input."""


class OutOfGridError(GeometryError):
    """A point that falls outside the grid's bounding box."""

    def __init__(self, message: str, row_f: float, col_f: float):
        super().__init__(message)
        self.row_f = row_f
        self.col_f = col_f


@dataclass(frozen=True)
class EarthModel:
    equatorial_radius_m: float = EQUATORIAL_RADIUS_M
    base_pixel_m: float = 2.0 * math.pi * EQUATORIAL_RADIUS_M / 2**32

    def __post_init__(self):
        if self.equatorial_radius_m <= 0 or self.base_pixel_m <= 0:
            raise GeometryError("earth model lengths must be positive")
        circumference = 2.0 * math.pi * self.equatorial_radius_m
        if abs(self.base_pixel_m * 2**32 - circumference) > 1e-3 * circumference:
            raise GeometryError(
                "base_pixel_m * 2**32 must match the equatorial circumference to 1e-3"
            )

    @property
    def circumference_m(self) -> float:
        return 2.0 * math.pi * self.equatorial_radius_m

    @classmethod
    def script_constant(cls) -> "EarthModel":
        """Model using the literal ``dx_Equator`` of the legacy shell script."""
        return cls(base_pixel_m=SCRIPT_BASE_PIXEL_M)


WGS84 = EarthModel()


@dataclass(frozen=True)
class GeoPoint:
    lat_deg: float
    long_deg: float

    def __post_init__(self):
        if not (math.isfinite(self.lat_deg) and abs(self.lat_deg) <= MAX_ABS_LAT):
            raise GeometryError(f"lat_deg={self.lat_deg} outside [-85, 85]")
        if not (math.isfinite(self.long_deg) and -180.0 <= self.long_deg < 180.0):
            raise GeometryError(f"long_deg={self.long_deg} outside [-180, 180)")


@dataclass(frozen=True)
class GridSpec:
    center: GeoPoint
    zoom: int
    n_pix: int
    n_lat: int
    n_long: int
    excluded: frozenset = field(default_factory=frozenset)
    earth: EarthModel = WGS84

    def __post_init__(self):
        if isinstance(self.zoom, bool) or int(self.zoom) != self.zoom:
            raise GeometryError(f"zoom={self.zoom!r} must be an integer")
        _check_zoom(self.zoom)
        for name in ("n_pix", "n_lat", "n_long"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise GeometryError(f"{name}={value!r} must be an integer >= 1")
        excluded = frozenset((int(i), int(j)) for i, j in self.excluded)
        for i, j in excluded:
            if not (1 <= i <= self.n_lat and 1 <= j <= self.n_long):
                raise GeometryError(
                    f"excluded tile ({i}, {j}) outside 1..{self.n_lat} x 1..{self.n_long}"
                )
        object.__setattr__(self, "excluded", excluded)

    @property
    def mosaic_shape(self) -> tuple[int, int]:
        return self.n_lat * self.n_pix, self.n_long * self.n_pix

    def summary(self) -> dict:
        return {
            "center": [self.center.lat_deg, self.center.long_deg],
            "zoom": self.zoom,
            "n_pix": self.n_pix,
            "n_lat": self.n_lat,
            "n_long": self.n_long,
            "excluded": sorted([i, j] for i, j in self.excluded),
        }


@dataclass(frozen=True)
class AngularSpans:
    d_lat_deg: float
    d_long_deg: float
    side_m: float


@dataclass(frozen=True)
class TileDescriptor:
    i: int
    j: int
    center: GeoPoint
    zoom: int
    n_pix: int


def _check_zoom(zoom):
    if not 0 <= zoom <= MAX_ZOOM:
        raise GeometryError(f"zoom={zoom} outside [0, {MAX_ZOOM}]")


def pixel_size(zoom: int, lat_deg: float, earth: EarthModel = WGS84) -> float:
    """Ground length in meters of one pixel at ``zoom`` and latitude ``lat_deg``."""
    _check_zoom(zoom)
    if not abs(lat_deg) <= MAX_ABS_LAT:
        raise GeometryError(f"lat_deg={lat_deg} outside [-85, 85]")
    return earth.base_pixel_m * 2.0 ** (24 - zoom) * math.cos(math.radians(lat_deg))


def long_span_deg(zoom: int, n_pix: int, earth: EarthModel = WGS84) -> float:
    """Longitude covered by ``n_pix`` pixels; the same at every latitude."""
    _check_zoom(zoom)
    return n_pix * earth.base_pixel_m * 2.0 ** (24 - zoom) * 360.0 / earth.circumference_m


def angular_spans(spec: GridSpec) -> AngularSpans:
    d_long = long_span_deg(spec.zoom, spec.n_pix, spec.earth)
    d_lat = d_long * math.cos(math.radians(spec.center.lat_deg))
    side = spec.n_pix * pixel_size(spec.zoom, spec.center.lat_deg, spec.earth)
    return AngularSpans(d_lat_deg=d_lat, d_long_deg=d_long, side_m=side)


def _check_index(spec: GridSpec, i: int, j: int):
    if not (1 <= i <= spec.n_lat and 1 <= j <= spec.n_long):
        raise GeometryError(
            f"tile index ({i}, {j}) outside 1..{spec.n_lat} x 1..{spec.n_long}"
        )


def tile_center(spec: GridSpec, i: int, j: int) -> GeoPoint:
    _check_index(spec, i, j)
    spans = angular_spans(spec)
    lat = spec.center.lat_deg + (i - (spec.n_lat + 1) / 2.0) * spans.d_lat_deg
    lon = spec.center.long_deg + (j - (spec.n_long + 1) / 2.0) * spans.d_long_deg
    return GeoPoint(lat, lon)


def plan_grid(spec: GridSpec) -> list[TileDescriptor]:
    """Descriptors for every non-excluded tile, ``i`` outer and ``j`` inner."""
    return [
        TileDescriptor(i, j, tile_center(spec, i, j), spec.zoom, spec.n_pix)
        for i in range(1, spec.n_lat + 1)
        for j in range(1, spec.n_long + 1)
        if (i, j) not in spec.excluded
    ]


def bounds(spec: GridSpec) -> tuple[float, float, float, float]:
    """``(south, north, west, east)`` edges of the whole array in degrees."""
    spans = angular_spans(spec)
    half_lat = spec.n_lat * spans.d_lat_deg / 2.0
    half_long = spec.n_long * spans.d_long_deg / 2.0
    c = spec.center
    return c.lat_deg - half_lat, c.lat_deg + half_lat, c.long_deg - half_long, c.long_deg + half_long


def latlong_to_mosaic_xy(spec: GridSpec, lat_deg: float, long_deg: float,
                         check: bool = True) -> tuple[float, float]:
    """Fractional ``(row, col)`` in the stitched mosaic.

    Row 0 is the north edge and column 0 the west edge; pixel ``(r, c)``
    covers ``[r, r+1) x [c, c+1)``.
    """
    spans = angular_spans(spec)
    row_f = (spec.n_lat / 2.0 - (lat_deg - spec.center.lat_deg) / spans.d_lat_deg) * spec.n_pix
    col_f = (spec.n_long / 2.0 + (long_deg - spec.center.long_deg) / spans.d_long_deg) * spec.n_pix
    if check:
        height, width = spec.mosaic_shape
        eps = 1e-6
        if not (-eps <= row_f <= height + eps and -eps <= col_f <= width + eps):
            raise OutOfGridError(
                f"point ({lat_deg}, {long_deg}) outside grid: row={row_f:.3f} col={col_f:.3f}",
                row_f, col_f,
            )
    return row_f, col_f


def latlong_to_mosaic_pixel(spec: GridSpec, p: GeoPoint) -> tuple[int, int]:
    row_f, col_f = latlong_to_mosaic_xy(spec, p.lat_deg, p.long_deg)
    height, width = spec.mosaic_shape
    # absorb representation error so tile centers land on n_pix/2 exactly
    row = min(max(math.floor(row_f + 1e-9), 0), height - 1)
    col = min(max(math.floor(col_f + 1e-9), 0), width - 1)
    return int(row), int(col)


def mosaic_pixel_to_latlong(spec: GridSpec, row: float, col: float) -> GeoPoint:
    """Geographic position of the center of mosaic pixel ``(row, col)``."""
    spans = angular_spans(spec)
    lat = spec.center.lat_deg + (spec.n_lat / 2.0 - (row + 0.5) / spec.n_pix) * spans.d_lat_deg
    lon = spec.center.long_deg + ((col + 0.5) / spec.n_pix - spec.n_long / 2.0) * spans.d_long_deg
    return GeoPoint(lat, lon)


def tile_block(spec: GridSpec, i: int, j: int) -> tuple[slice, slice]:
    """Row/column slices of tile ``(i, j)`` inside the mosaic; ``i = n_lat`` is the top row."""
    _check_index(spec, i, j)
    top = (spec.n_lat - i) * spec.n_pix
    left = (j - 1) * spec.n_pix
    return slice(top, top + spec.n_pix), slice(left, left + spec.n_pix)


def grid_spec(center: Iterable[float], zoom: int, n_pix: int, n_lat: int, n_long: int,
              excluded: Iterable = (), earth: EarthModel = WGS84) -> GridSpec:
    lat, lon = center
    return GridSpec(GeoPoint(float(lat), float(lon)), int(zoom), int(n_pix), int(n_lat),
                    int(n_long), frozenset(tuple(e) for e in excluded), earth)
