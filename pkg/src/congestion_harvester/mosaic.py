"""Stitch one capture's tiles into a single RGB raster."""
from __future__ import annotations

import io
from collections.abc import Mapping
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np
from PIL import Image

from .geo_grid import GridSpec, tile_block
from .tile_archive import ArchiveHandle, lookup

PLACEHOLDER_RGB = (128, 128, 128)


class MosaicError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mosaic:
    pixels: np.ndarray
    spec: GridSpec
    timestamp: datetime | None = None
    missing: frozenset = field(default_factory=frozenset)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


def decode_png(data: bytes | str | Path) -> np.ndarray:
    """Decode a PNG (bytes or path) to ``uint8`` RGB, flattening alpha over white."""
    src = io.BytesIO(data) if isinstance(data, (bytes, bytearray)) else data
    with Image.open(src) as img:
        img.load()
        if img.mode in ("RGBA", "LA", "PA") or (img.mode == "P" and "transparency" in img.info):
            return flatten_alpha(np.asarray(img.convert("RGBA")))
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def flatten_alpha(rgba: np.ndarray) -> np.ndarray:
    """Composite an RGBA array over white."""
    rgba = rgba.astype(np.uint16)
    alpha = rgba[..., 3:4]
    rgb = (rgba[..., :3] * alpha + 255 * (255 - alpha) + 127) // 255
    return rgb.astype(np.uint8)


def encode_png(pixels: np.ndarray, compress_level: int = 1) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), "RGB").save(
        buf, format="PNG", compress_level=compress_level)
    return buf.getvalue()


def _as_rgb(tile) -> np.ndarray:
    if isinstance(tile, np.ndarray):
        if tile.ndim == 3 and tile.shape[2] == 4:
            return flatten_alpha(tile)
        return tile
    return decode_png(tile)


def stitch(tiles, spec: GridSpec, placeholder=PLACEHOLDER_RGB,
           timestamp: datetime | None = None) -> Mosaic:
    """Place tile ``(i, j)`` at row block ``n_lat - i`` and column block ``j - 1``.

    ``tiles`` maps ``(i, j)`` to PNG bytes, a path, or an RGB array; an iterable
    of ``((i, j), tile)`` pairs is accepted too, in which case repeated indices
    are rejected. Absent tiles are filled with ``placeholder``.
    """
    items = tiles.items() if isinstance(tiles, Mapping) else tiles
    canvas = np.empty(spec.mosaic_shape + (3,), dtype=np.uint8)
    canvas[...] = np.asarray(placeholder, dtype=np.uint8)
    seen = set()
    for (i, j), tile in items:
        if (i, j) in seen:
            raise MosaicError(f"duplicate tile ({i}, {j})")
        if not (1 <= i <= spec.n_lat and 1 <= j <= spec.n_long):
            raise MosaicError(f"tile ({i}, {j}) outside the {spec.n_lat} x {spec.n_long} grid")
        seen.add((i, j))
        rgb = _as_rgb(tile)
        if rgb.shape[:2] != (spec.n_pix, spec.n_pix) or rgb.ndim != 3 or rgb.shape[2] != 3:
            raise MosaicError(
                f"tile ({i}, {j}) has shape {rgb.shape}, expected ({spec.n_pix}, {spec.n_pix}, 3)")
        rows, cols = tile_block(spec, i, j)
        canvas[rows, cols] = rgb
    missing = frozenset(
        (i, j) for i in range(1, spec.n_lat + 1) for j in range(1, spec.n_long + 1)
        if (i, j) not in seen
    )
    return Mosaic(canvas, spec, timestamp, missing)


def split(image: np.ndarray, spec: GridSpec) -> dict[tuple[int, int], np.ndarray]:
    """Inverse of :func:`stitch` for a complete grid."""
    if image.shape[:2] != spec.mosaic_shape:
        raise MosaicError(f"image shape {image.shape[:2]} != mosaic shape {spec.mosaic_shape}")
    out = {}
    for i in range(1, spec.n_lat + 1):
        for j in range(1, spec.n_long + 1):
            rows, cols = tile_block(spec, i, j)
            out[(i, j)] = image[rows, cols].copy()
    return out


def stitch_capture(handle: ArchiveHandle, timestamp: datetime, spec: GridSpec,
                   placeholder=PLACEHOLDER_RGB) -> Mosaic:
    paths = lookup(handle, timestamp)
    if not paths:
        raise MosaicError(f"no tiles found for {timestamp.isoformat()}")
    # tiles outside the grid (stale files from another layout) are ignored
    usable = {ij: p for ij, p in paths.items()
              if 1 <= ij[0] <= spec.n_lat and 1 <= ij[1] <= spec.n_long}
    return stitch(usable, spec, placeholder, timestamp)


def export_png(m: Mosaic | np.ndarray, path) -> Path:
    pixels = m.pixels if isinstance(m, Mosaic) else m
    path = Path(path)
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), "RGB").save(path, format="PNG")
    return path


def read_png(path) -> np.ndarray:
    return decode_png(Path(path))


def grid_overlay(m: Mosaic, color=(0, 0, 0), width: int = 2) -> np.ndarray:
    """Copy of the mosaic with tile borders drawn, for human inspection only."""
    out = m.pixels.copy()
    n = m.spec.n_pix
    color = np.asarray(color, dtype=np.uint8)
    for k in range(0, out.shape[0] + 1, n):
        out[max(k - width // 2, 0):k + (width + 1) // 2] = color
    for k in range(0, out.shape[1] + 1, n):
        out[:, max(k - width // 2, 0):k + (width + 1) // 2] = color
    return out
