"""Deterministic synthetic traffic tiles and study generator.

Roads are polylines in latitude/longitude drawn in exact palette colors on a
plain background. A tile is a pure function of (scenario, tile center, zoom,
tile size, timestamp), and every tile is drawn in the same global frame, so
stitched neighbours line up without seams.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
import zlib
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from . import kernels
from .acquisition import CaptureJob, ProviderConfig
from .analytics import StudyDesign, stratum_of, window_start, write_observations_csv, zone
from .congestion import CCC_ORDER, CccObservation, CongestionPalette, default_palette
from .geo_grid import GeoPoint, GridSpec, TileDescriptor, long_span_deg
from .mosaic import encode_png
from .tile_archive import ArchiveHandle

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SCHEDULE_KINDS = ("constant", "hourly", "explicit", "study_shift")
DEFAULT_BACKGROUND = (250, 248, 240)


class ScenarioError(ValueError):
    pass


def _minute_utc(ts: datetime) -> datetime:
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).replace(second=0, microsecond=0)


def _check_label(label):
    if label is not None and label not in CCC_ORDER:
        raise ScenarioError(f"unknown congestion color {label!r}")
    return label


@dataclass(frozen=True)
class Schedule:
    """Congestion color of one road over time; ``None`` means not drawn."""

    kind: str = "constant"
    color: str | None = "green"
    hourly: dict = field(default_factory=dict)
    entries: dict = field(default_factory=dict)
    default: str | None = None
    low: int = 3
    high: int = 4
    weekday_shift: float = 0.0
    weekend_shift: float = 0.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ScenarioError(f"schedule kind {self.kind!r} not in {SCHEDULE_KINDS}")
        _check_label(self.color)
        _check_label(self.default)
        for v in list(self.hourly.values()) + list(self.entries.values()):
            _check_label(v)
        if not (1 <= self.low <= 5 and 1 <= self.high <= 5):
            raise ScenarioError("study_shift levels must be CCC values in 1..5")

    def color_at(self, ts: datetime, tz=timezone.utc) -> str | None:
        if self.kind == "constant":
            return self.color
        if self.kind == "hourly":
            return self.hourly.get(ts.astimezone(tz).hour, self.default)
        if self.kind == "explicit":
            return self.entries.get(_minute_utc(ts), self.default)
        raise ScenarioError("study_shift schedules must be materialized against a study design")

    @classmethod
    def from_dict(cls, doc: dict) -> "Schedule":
        kind = doc.get("kind", "constant")
        if kind == "constant":
            return cls("constant", color=doc.get("color"))
        if kind == "hourly":
            return cls("hourly", color=None, default=doc.get("default"),
                       hourly={int(h): c for h, c in doc["colors"].items()})
        if kind == "explicit":
            return cls("explicit", color=None, default=doc.get("default"),
                       entries={_minute_utc(datetime.fromisoformat(t)): c
                                for t, c in doc["entries"].items()})
        if kind == "study_shift":
            return cls("study_shift", color=None, low=int(doc.get("low", 3)),
                       high=int(doc.get("high", 4)),
                       weekday_shift=float(doc.get("weekday_shift", 0.0)),
                       weekend_shift=float(doc.get("weekend_shift", 0.0)))
        raise ScenarioError(f"schedule kind {kind!r} not in {SCHEDULE_KINDS}")

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "color": self.color}
        if self.kind == "hourly":
            return {"kind": "hourly", "default": self.default,
                    "colors": {str(h): c for h, c in sorted(self.hourly.items())}}
        if self.kind == "explicit":
            return {"kind": "explicit", "default": self.default,
                    "entries": {t.isoformat(): c for t, c in sorted(self.entries.items())}}
        return {"kind": "study_shift", "low": self.low, "high": self.high,
                "weekday_shift": self.weekday_shift, "weekend_shift": self.weekend_shift}


@dataclass(frozen=True)
class Road:
    road_id: str
    polyline: tuple[GeoPoint, ...]
    width_px: float
    schedule: Schedule
    site_id: str | None = None
    segment_id: str | None = None

    def __post_init__(self):
        if len(self.polyline) < 2:
            raise ScenarioError(f"road {self.road_id}: polyline needs two or more vertices")
        if self.width_px <= 0:
            raise ScenarioError(f"road {self.road_id}: width_px must be positive")


@dataclass(frozen=True)
class Scenario:
    seed: int = 0
    roads: tuple[Road, ...] = ()
    background: tuple[int, int, int] = DEFAULT_BACKGROUND
    background_noise: int = 0
    ref_lat: float | None = None
    antialias: bool = False
    timezone: str = "UTC"
    start: datetime | None = None
    duration_h: float | None = None
    cadence_h: float = 3.0
    palette: CongestionPalette = field(default_factory=default_palette)

    @property
    def tz(self):
        return zone(self.timezone)

    @classmethod
    def from_dict(cls, doc: dict, palette: CongestionPalette | None = None) -> "Scenario":
        if doc.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ScenarioError(f"unsupported scenario version {doc.get('version')!r}")
        roads = tuple(
            Road(str(r["road_id"]),
                 tuple(GeoPoint(float(a), float(b)) for a, b in r["polyline"]),
                 float(r.get("width_px", 5)),
                 Schedule.from_dict(r.get("schedule", {})),
                 r.get("site_id"), r.get("segment_id"))
            for r in doc.get("roads", [])
        )
        start = doc.get("start")
        return cls(
            seed=int(doc.get("seed", 0)),
            roads=roads,
            background=tuple(int(v) for v in doc.get("background", DEFAULT_BACKGROUND)),
            background_noise=int(doc.get("background_noise", 0)),
            ref_lat=doc.get("ref_lat"),
            antialias=bool(doc.get("antialias", False)),
            timezone=doc.get("timezone", "UTC"),
            start=datetime.fromisoformat(start) if start else None,
            duration_h=doc.get("duration_h"),
            cadence_h=float(doc.get("cadence_h", 3.0)),
            palette=palette or default_palette(),
        )

    def to_dict(self) -> dict:
        doc = {
            "version": SCHEMA_VERSION,
            "seed": self.seed,
            "background": list(self.background),
            "background_noise": self.background_noise,
            "ref_lat": self.ref_lat,
            "antialias": self.antialias,
            "timezone": self.timezone,
            "cadence_h": self.cadence_h,
            "roads": [
                {"road_id": r.road_id, "site_id": r.site_id, "segment_id": r.segment_id,
                 "width_px": r.width_px,
                 "polyline": [[p.lat_deg, p.long_deg] for p in r.polyline],
                 "schedule": r.schedule.to_dict()}
                for r in self.roads
            ],
        }
        if self.start is not None:
            doc["start"] = self.start.isoformat()
        if self.duration_h is not None:
            doc["duration_h"] = self.duration_h
        return doc


def load_scenario(path, palette: CongestionPalette | None = None) -> Scenario:
    return Scenario.from_dict(json.loads(Path(path).read_text()), palette)


def save_scenario(scenario: Scenario, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(scenario.to_dict(), indent=1))
    return path


# ---------------------------------------------------------------------------
# rendering


def _noise_rng(scenario: Scenario, tile: TileDescriptor, ts: datetime) -> np.random.Generator:
    key = (f"{scenario.seed}|{tile.center.lat_deg:.10f}|{tile.center.long_deg:.10f}|"
           f"{tile.zoom}|{tile.n_pix}|{_minute_utc(ts).isoformat()}")
    digest = hashlib.sha256(key.encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def tile_frame(scenario: Scenario, tile: TileDescriptor) -> tuple[float, float]:
    """``(d_lat_deg, d_long_deg)`` spanned by ``tile``."""
    d_long = long_span_deg(tile.zoom, tile.n_pix)
    ref = scenario.ref_lat if scenario.ref_lat is not None else tile.center.lat_deg
    return d_long * math.cos(math.radians(ref)), d_long


def render_array(scenario: Scenario, tile: TileDescriptor, timestamp: datetime) -> np.ndarray:
    n = tile.n_pix
    canvas = np.empty((n, n, 3), dtype=np.float64)
    canvas[...] = scenario.background
    if scenario.background_noise:
        rng = _noise_rng(scenario, tile, timestamp)
        canvas += rng.integers(-scenario.background_noise, scenario.background_noise + 1,
                               size=canvas.shape)
    d_lat, d_long = tile_frame(scenario, tile)
    samples = 4 if scenario.antialias else 1
    for road in scenario.roads:
        label = road.schedule.color_at(timestamp, scenario.tz)
        if label is None:
            continue
        rgb = np.asarray(scenario.palette.rgb_of(label), dtype=np.float64)
        ys = np.array([(tile.center.lat_deg - p.lat_deg) / d_lat * n + n / 2.0 for p in road.polyline])
        xs = np.array([(p.long_deg - tile.center.long_deg) / d_long * n + n / 2.0 for p in road.polyline])
        cover = kernels.stroke_coverage(ys, xs, road.width_px / 2.0, (n, n), samples)
        hit = cover > 0
        if not hit.any():
            continue
        c = cover[hit][:, None]
        canvas[hit] = canvas[hit] * (1.0 - c) + rgb * c
    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)


def render_tile(scenario: Scenario, tile: TileDescriptor, timestamp: datetime) -> bytes:
    """PNG bytes of one synthetic tile."""
    return encode_png(render_array(scenario, tile, timestamp))


class SyntheticProvider:
    serial = False

    def __init__(self, scenario: Scenario):
        self.scenario = scenario

    def fetch(self, job: CaptureJob) -> bytes:
        return render_tile(self.scenario, job.tile, job.requested_at)


# ---------------------------------------------------------------------------
# study generation


def capture_ticks(design: StudyDesign, anchor: datetime | None = None) -> list[datetime]:
    anchor = anchor or design.baseline[0]
    step = timedelta(hours=design.cadence_h)
    end = design.intervention[1]
    k = 0
    ticks = []
    while anchor + k * step < end:
        ticks.append(anchor + k * step)
        k += 1
    return ticks


def _shift_series(road: Road, seed: int, design: StudyDesign, ticks) -> dict[datetime, int]:
    """Programmed CCC series with an exact per-stratum intervention shift.

    Each window gets 1-3 of its captures at ``high`` and the rest at ``low``;
    then intervention captures are nudged one level at a time until the
    intervention mean exceeds the baseline mean by the programmed shift (to
    the nearest achievable step).
    """
    sched = road.schedule
    rng = np.random.default_rng([seed, zlib.crc32(road.road_id.encode())])
    by_window = defaultdict(list)
    for t in ticks:
        by_window[window_start(t, design)].append(t)
    values: dict[datetime, int] = {}
    cell = defaultdict(list)
    for start in sorted(by_window):
        members = by_window[start]
        k_high = min(int(rng.choice([1, 2, 3], p=[0.25, 0.5, 0.25])), len(members))
        high = set(rng.permutation(len(members))[:k_high].tolist())
        for idx, t in enumerate(members):
            values[t] = sched.high if idx in high else sched.low
        period = design.period_of(start)
        if period is not None:
            cell[(period, stratum_of(start))].extend(members)
    for stratum, shift in (("weekday", sched.weekday_shift), ("weekend", sched.weekend_shift)):
        base = cell.get(("baseline", stratum), [])
        inter = cell.get(("intervention", stratum), [])
        if not base or not inter:
            continue
        base_mean = sum(values[t] for t in base) / len(base)
        target = round((base_mean + shift) * len(inter))
        delta = target - sum(values[t] for t in inter)
        step = 1 if delta > 0 else -1
        while delta:
            movable = [t for t in inter if 1 <= values[t] + step <= 5]
            if not movable:
                logger.warning("road %s: cannot reach the programmed %s shift", road.road_id, stratum)
                break
            t = movable[int(rng.integers(len(movable)))]
            values[t] += step
            delta -= step
    return values


def materialize(scenario: Scenario, design: StudyDesign, anchor: datetime | None = None) -> Scenario:
    """Replace ``study_shift`` schedules with explicit per-capture colors."""
    ticks = capture_ticks(design, anchor)
    roads = []
    for road in scenario.roads:
        if road.schedule.kind == "study_shift":
            series = _shift_series(road, scenario.seed, design, ticks)
            entries = {_minute_utc(t): CCC_ORDER[v - 1] for t, v in series.items()}
            road = replace(road, schedule=Schedule("explicit", color=None, entries=entries))
        roads.append(road)
    return replace(scenario, roads=tuple(roads))


def ground_truth(scenario: Scenario, ticks, rois=None) -> list[CccObservation]:
    """Programmed CCC per capture for each ROI (or each road with site/segment ids).

    A ROI with no matching road, or a road that is not drawn at a capture, is
    a missing observation.
    """
    by_key = {(r.site_id, r.segment_id): r for r in scenario.roads if r.site_id is not None}
    keys = [roi.key for roi in rois] if rois is not None else list(by_key)
    out = []
    for t in ticks:
        ts = _minute_utc(t)
        for key in keys:
            road = by_key.get(key)
            label = road.schedule.color_at(ts, scenario.tz) if road else None
            ccc = CCC_ORDER.index(label) + 1 if label else None
            out.append(CccObservation(ts, key[0], key[1], ccc, None))
    return out


@dataclass
class StudyResult:
    archive: ArchiveHandle
    scenario: Scenario
    reports: list
    truth: list[CccObservation]
    truth_path: Path | None = None


def generate_study(scenario: Scenario, design: StudyDesign, spec: GridSpec, archive_root, *,
                   rois=None, truth_path=None, archive_tz="UTC", safe_names: bool = True,
                   anchor: datetime | None = None, max_concurrency: int = 4) -> StudyResult:
    """Capture a full synthetic study into ``archive_root`` on a simulated clock."""
    from .scheduler import SimulatedClock, run_schedule

    if scenario.ref_lat is None:
        scenario = replace(scenario, ref_lat=spec.center.lat_deg)
    scenario = materialize(scenario, design, anchor)
    root = Path(archive_root)
    root.mkdir(parents=True, exist_ok=True)
    handle = ArchiveHandle(root, archive_tz, safe_names)
    anchor = anchor or design.baseline[0]
    cfg = ProviderConfig(kind="synthetic", max_retries=0, max_concurrency=max_concurrency)
    clock = SimulatedClock(anchor)
    reports = list(run_schedule(spec, cfg, handle, timedelta(hours=design.cadence_h), anchor,
                                design.intervention[1], clock=clock,
                                provider=SyntheticProvider(scenario)))
    ticks = [r.timestamp for r in reports]
    truth = ground_truth(scenario, ticks, rois)
    if truth_path is not None:
        truth_path = write_observations_csv(truth, truth_path)
    return StudyResult(handle, scenario, reports, truth, truth_path)


# ---------------------------------------------------------------------------
# HTTP service


class _TileHandler(BaseHTTPRequestHandler):
    scenario: Scenario
    clock = staticmethod(lambda: datetime.now(timezone.utc))

    def do_GET(self):
        q = parse_qs(urlparse(self.path).query)
        try:
            lat = float(q["lat"][0])
            lon = float(q["long"][0])
            z = int(q["z"][0])
            n = int(q["n"][0])
            ts = datetime.fromisoformat(q["t"][0]) if "t" in q else self.clock()
            tile = TileDescriptor(0, 0, GeoPoint(lat, lon), z, n)
            body = render_tile(self.scenario, tile, ts)
        except (KeyError, ValueError) as exc:
            msg = f"bad request: {exc}".encode()
            self.send_response(400)
            self.send_header("Content-Type", "text/plain")
            self.send_header("Content-Length", str(len(msg)))
            self.end_headers()
            self.wfile.write(msg)
            return
        self.send_response(200)
        self.send_header("Content-Type", "image/png")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, fmt, *args):
        logger.debug("tile service: " + fmt, *args)


def make_server(scenario: Scenario, host: str = "127.0.0.1", port: int = 0,
                clock=None) -> ThreadingHTTPServer:
    """HTTP server answering ``GET /?lat=&long=&z=&n=[&t=ISO]`` with ``image/png``.

    ``port=0`` picks a free port (see ``server.server_address``).
    """
    attrs = {"scenario": scenario}
    if clock is not None:
        attrs["clock"] = staticmethod(clock)
    handler = type("TileHandler", (_TileHandler,), attrs)
    return ThreadingHTTPServer((host, port), handler)


def serve_in_thread(server: ThreadingHTTPServer) -> threading.Thread:
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return thread
