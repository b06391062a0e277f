"""Traffic-map tile harvesting, stitching and congestion analytics."""
from __future__ import annotations

__version__ = "0.1.0"

from .geo_grid import (EarthModel, GeoPoint, GridSpec, TileDescriptor, angular_spans, grid_spec,
                       latlong_to_mosaic_pixel, pixel_size, plan_grid, tile_center)

__all__ = [
    "EarthModel", "GeoPoint", "GridSpec", "TileDescriptor", "angular_spans", "grid_spec",
    "latlong_to_mosaic_pixel", "pixel_size", "plan_grid", "tile_center",
]
