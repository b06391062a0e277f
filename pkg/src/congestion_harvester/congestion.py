"""Road-pixel segmentation into the five congestion colors.

The congestion color code (CCC) is ordinal: maroon=1, red=2, orange=3,
green=4, gray=5. Lower means more congested.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import kernels
from .geo_grid import GeoPoint, GridSpec, OutOfGridError, latlong_to_mosaic_xy
from .mosaic import Mosaic, stitch

logger = logging.getLogger(__name__)

CCC_ORDER = ("maroon", "red", "orange", "green", "gray")
UNMATCHED = "unmatched"
SCHEMA_VERSION = 1


class PaletteError(ValueError):
    pass


class RoiError(ValueError):
    pass


@dataclass(frozen=True)
class PaletteColor:
    label: str
    ccc: int
    rgb: tuple[int, int, int]


@dataclass(frozen=True)
class CongestionPalette:
    colors: tuple[PaletteColor, ...]
    tau: float = 60.0
    f_min: float = 0.05
    provenance: str = ""

    def __post_init__(self):
        labels = tuple(c.label for c in self.colors)
        if labels != CCC_ORDER:
            raise PaletteError(f"palette labels must be {CCC_ORDER}, got {labels}")
        if tuple(c.ccc for c in self.colors) != (1, 2, 3, 4, 5):
            raise PaletteError("palette ccc values must be 1..5 in order")
        for c in self.colors:
            if len(c.rgb) != 3 or not all(0 <= v <= 255 for v in c.rgb):
                raise PaletteError(f"{c.label}: rgb must be three values in 0..255")
        if self.tau <= 0:
            raise PaletteError("tau must be positive")
        if not 0.0 <= self.f_min <= 1.0:
            raise PaletteError("f_min must be in [0, 1]")
        for a, b in itertools.combinations(self.colors, 2):
            d = math.dist(a.rgb, b.rgb)
            if d <= 2 * self.tau:
                raise PaletteError(
                    f"{a.label} and {b.label} are {d:.1f} apart; separability needs > 2*tau = {2 * self.tau}")

    @property
    def refs(self) -> np.ndarray:
        return np.array([c.rgb for c in self.colors], dtype=np.int32)

    def rgb_of(self, label_or_ccc) -> tuple[int, int, int]:
        for c in self.colors:
            if c.label == label_or_ccc or c.ccc == label_or_ccc:
                return c.rgb
        raise KeyError(label_or_ccc)

    def ccc_of(self, label: str) -> int:
        return CCC_ORDER.index(label) + 1

    @classmethod
    def from_dict(cls, doc: dict) -> "CongestionPalette":
        if doc.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise PaletteError(f"unsupported palette version {doc.get('version')!r}")
        colors = tuple(
            PaletteColor(c["label"], int(c["ccc"]), tuple(int(v) for v in c["rgb"]))
            for c in doc["colors"]
        )
        return cls(colors, float(doc.get("tau", 60.0)), float(doc.get("f_min", 0.05)),
                   doc.get("provenance", ""))

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "provenance": self.provenance,
            "colors": [{"label": c.label, "ccc": c.ccc, "rgb": list(c.rgb)} for c in self.colors],
            "tau": self.tau,
            "f_min": self.f_min,
        }


def load_palette(path=None) -> CongestionPalette:
    """Palette from a JSON file, or the packaged default when ``path`` is None."""
    if path is None:
        text = resources.files("congestion_harvester").joinpath("data/default_palette.json").read_text()
    else:
        text = Path(path).read_text()
    return CongestionPalette.from_dict(json.loads(text))


def default_palette() -> CongestionPalette:
    return load_palette(None)


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return (v > 0) - (v < 0)

    def on_seg(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    o1, o2, o3, o4 = orient(p1, p2, p3), orient(p1, p2, p4), orient(p3, p4, p1), orient(p3, p4, p2)
    if o1 != o2 and o3 != o4:
        return True
    return ((o1 == 0 and on_seg(p1, p2, p3)) or (o2 == 0 and on_seg(p1, p2, p4))
            or (o3 == 0 and on_seg(p3, p4, p1)) or (o4 == 0 and on_seg(p3, p4, p2)))


def is_simple_polygon(vertices) -> bool:
    pts = [tuple(v) for v in vertices]
    n = len(pts)
    if n < 3:
        return False
    edges = [(pts[k], pts[(k + 1) % n]) for k in range(n)]
    for a in range(n):
        for b in range(a + 1, n):
            if b == a + 1 or (a == 0 and b == n - 1):
                continue
            if _segments_cross(*edges[a], *edges[b]):
                return False
    return True


@dataclass(frozen=True)
class RoadSegmentROI:
    site_id: str
    segment_id: str
    polygon: tuple[GeoPoint, ...]
    description: str = ""

    def __post_init__(self):
        if len(self.polygon) < 3:
            raise RoiError(f"{self.key_str}: polygon needs at least 3 vertices")
        if not is_simple_polygon([(p.lat_deg, p.long_deg) for p in self.polygon]):
            raise RoiError(f"{self.key_str}: polygon is self-intersecting")

    @property
    def key(self) -> tuple[str, str]:
        return self.site_id, self.segment_id

    @property
    def key_str(self) -> str:
        return f"{self.site_id}/{self.segment_id}"


def rois_from_dict(doc: dict) -> list[RoadSegmentROI]:
    if doc.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise RoiError(f"unsupported ROI file version {doc.get('version')!r}")
    out = []
    for site in doc["sites"]:
        for seg in site["segments"]:
            poly = tuple(GeoPoint(float(lat), float(lon)) for lat, lon in seg["polygon"])
            out.append(RoadSegmentROI(str(site["site_id"]), str(seg["segment_id"]), poly,
                                      seg.get("description", site.get("description", ""))))
    keys = [r.key for r in out]
    if len(set(keys)) != len(keys):
        raise RoiError("duplicate (site_id, segment_id) in ROI file")
    return out


def rois_to_dict(rois) -> dict:
    sites: dict[str, dict] = {}
    for r in rois:
        site = sites.setdefault(r.site_id, {"site_id": r.site_id, "segments": []})
        site["segments"].append({
            "segment_id": r.segment_id,
            "description": r.description,
            "polygon": [[p.lat_deg, p.long_deg] for p in r.polygon],
        })
    return {"version": SCHEMA_VERSION, "sites": list(sites.values())}


def load_rois(path) -> list[RoadSegmentROI]:
    return rois_from_dict(json.loads(Path(path).read_text()))


class RoiPixels(NamedTuple):
    rows: np.ndarray
    cols: np.ndarray

    def __len__(self):
        return len(self.rows)


@dataclass(frozen=True)
class CccObservation:
    timestamp: datetime
    site_id: str
    segment_id: str
    ccc: int | None
    classified_fraction: float
    vote_histogram: dict = field(default_factory=dict)

    @property
    def key(self) -> tuple[str, str]:
        return self.site_id, self.segment_id


def classify_pixel(rgb, palette: CongestionPalette) -> str:
    """Label of the nearest palette color within ``tau``, else ``"unmatched"``."""
    idx = int(kernels.classify_pixels(np.asarray(rgb, dtype=np.uint8).reshape(1, 3),
                                      palette.refs, palette.tau)[0])
    return UNMATCHED if idx < 0 else palette.colors[idx].label


def classify_image(pixels: np.ndarray, palette: CongestionPalette) -> np.ndarray:
    """Per-pixel CCC (1..5) with 0 for unmatched, shaped like the image."""
    idx = kernels.classify_pixels(pixels, palette.refs, palette.tau)
    return (idx.astype(np.int16) + 1).astype(np.uint8).reshape(pixels.shape[:-1])


def rasterize_roi(roi: RoadSegmentROI, spec: GridSpec) -> RoiPixels:
    """Mosaic pixels whose centers lie inside the ROI polygon."""
    try:
        xy = [latlong_to_mosaic_xy(spec, p.lat_deg, p.long_deg) for p in roi.polygon]
    except OutOfGridError as exc:
        raise RoiError(f"ROI {roi.key_str} leaves the grid: {exc}") from exc
    ys = np.array([v[0] for v in xy])
    xs = np.array([v[1] for v in xy])
    sub, r0, c0 = kernels.polygon_mask(ys, xs, spec.mosaic_shape)
    rr, cc = np.nonzero(sub)
    if rr.size == 0:
        logger.warning("ROI %s covers no pixel centers at this resolution", roi.key_str)
    return RoiPixels((rr + r0).astype(np.intp), (cc + c0).astype(np.intp))


def rasterize_rois(rois, spec: GridSpec) -> dict[tuple[str, str], RoiPixels]:
    return {roi.key: rasterize_roi(roi, spec) for roi in rois}


def vote(labels: np.ndarray, palette: CongestionPalette) -> tuple[int | None, float, dict]:
    """Plurality CCC from per-pixel palette indices (-1 = unmatched).

    Ties go to the lower CCC. Returns ``(ccc or None, classified_fraction, histogram)``.
    """
    counts = np.bincount(labels.astype(np.int64) + 1, minlength=len(palette.colors) + 1)
    hist = {UNMATCHED: int(counts[0])}
    hist.update({c.label: int(n) for c, n in zip(palette.colors, counts[1:])})
    total = int(counts.sum())
    matched = total - int(counts[0])
    fraction = matched / total if total else 0.0
    if total == 0 or matched == 0 or fraction < palette.f_min:
        return None, fraction, hist
    best = int(np.argmax(counts[1:]))
    return palette.colors[best].ccc, fraction, hist


def extract_ccc(source, rois, palette: CongestionPalette, *, spec: GridSpec | None = None,
                timestamp: datetime | None = None, masks=None) -> list[CccObservation]:
    """One observation per ROI for a single capture.

    ``source`` is a :class:`Mosaic` or a tile mapping accepted by
    :func:`~congestion_harvester.mosaic.stitch` (then ``spec`` is required).
    Pre-rasterized ``masks`` from :func:`rasterize_rois` can be passed to avoid
    re-filling polygons for every capture.
    """
    if isinstance(source, Mosaic):
        mosaic = source
    else:
        if spec is None:
            raise ValueError("spec is required when extracting from tiles")
        mosaic = stitch(source, spec, timestamp=timestamp)
    ts = timestamp if timestamp is not None else mosaic.timestamp
    if masks is None:
        masks = rasterize_rois(rois, mosaic.spec)
    out = []
    for roi in rois:
        px = masks[roi.key]
        labels = kernels.classify_pixels(mosaic.pixels[px.rows, px.cols], palette.refs, palette.tau)
        ccc, fraction, hist = vote(labels, palette)
        out.append(CccObservation(ts, roi.site_id, roi.segment_id, ccc, fraction, hist))
    return out
