"""Single JSON configuration file for the whole pipeline.

Relative paths are resolved against the directory holding the config file.
Layout (all sections except ``grid`` optional)::

    {
      "version": 1,
      "grid": {"center": [lat, long], "zoom": 15, "n_pix": 1000,
               "n_lat": 6, "n_long": 3, "excluded": [[4, 1], ...],
               "earth": "wgs84" | "script"},
      "provider": {"kind": "synthetic", "endpoint": "...", ...},
      "archive": {"root": "archive", "timezone": "UTC", "safe_names": true},
      "palette": "palette.json" | {...inline palette...} | null,
      "sites": "sites.json" | {...inline ROI document...},
      "schedule": {"interval_h": 3, "anchor": "2020-01-06T00:00", "timezone": "America/New_York"},
      "study": {"baseline": [start, end], "intervention": [start, end],
                "window_h": 12, "cadence_h": 3, "timezone": "America/New_York"},
      "scenario": "scenario.json",
      "output_dir": "out"
    }
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from datetime import datetime, time, timedelta, timezone
from pathlib import Path

from .acquisition import AcquisitionError, ProviderConfig
from .analytics import DesignError, StudyDesign, zone
from .congestion import (CongestionPalette, PaletteError, RoadSegmentROI, RoiError,
                         default_palette, load_palette, rasterize_roi, rois_from_dict)
from .geo_grid import WGS84, EarthModel, GeometryError, GridSpec, grid_spec

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field."""


@dataclass(frozen=True)
class ScheduleConfig:
    interval: timedelta
    anchor: datetime
    timezone: str = "UTC"


@dataclass(frozen=True)
class ArchiveConfig:
    root: Path
    timezone: str = "UTC"
    safe_names: bool = True


@dataclass
class Config:
    grid: GridSpec
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    archive: ArchiveConfig = field(default_factory=lambda: ArchiveConfig(Path("archive")))
    palette: CongestionPalette = field(default_factory=default_palette)
    sites: list[RoadSegmentROI] = field(default_factory=list)
    schedule: ScheduleConfig | None = None
    study: StudyDesign | None = None
    scenario_path: Path | None = None
    output_dir: Path = Path("out")
    base_dir: Path = Path(".")


def _fail(where: str, exc) -> ConfigError:
    return ConfigError(f"{where}: {exc}")


def _parse_time(value, tz, where: str) -> datetime:
    """ISO timestamp; naive values are read in ``tz``."""
    try:
        ts = datetime.fromisoformat(str(value))
    except ValueError as exc:
        raise _fail(where, f"not an ISO timestamp: {value!r}") from exc
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=zone(tz))
    return ts


def _resolve(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _load_json_or_inline(base: Path, value, where: str):
    if isinstance(value, dict):
        return value
    path = _resolve(base, value)
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise _fail(where, f"cannot read {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise _fail(where, f"{path} is not valid JSON: {exc}") from exc


def _check_zone(name, where):
    try:
        zone(name)
    except Exception as exc:
        raise _fail(where, f"unknown timezone {name!r}") from exc
    return name


def parse_grid(doc: dict) -> GridSpec:
    if not isinstance(doc, dict):
        raise ConfigError("grid: section is required and must be an object")
    for key in ("center", "zoom", "n_pix", "n_lat", "n_long"):
        if key not in doc:
            raise ConfigError(f"grid.{key}: required")
    earth_name = doc.get("earth", "wgs84")
    if earth_name == "wgs84":
        earth = WGS84
    elif earth_name == "script":
        earth = EarthModel.script_constant()
    else:
        raise ConfigError(f"grid.earth: expected 'wgs84' or 'script', got {earth_name!r}")
    try:
        return grid_spec(doc["center"], int(doc["zoom"]), int(doc["n_pix"]), int(doc["n_lat"]),
                         int(doc["n_long"]), [tuple(e) for e in doc.get("excluded", [])], earth)
    except (GeometryError, TypeError, ValueError) as exc:
        raise _fail("grid", exc) from exc


def parse_provider(doc: dict | None) -> ProviderConfig:
    doc = dict(doc or {})
    known = {f.name for f in fields(ProviderConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"provider.{sorted(unknown)[0]}: unknown field")
    try:
        return ProviderConfig(**doc)
    except (AcquisitionError, TypeError) as exc:
        raise _fail("provider", exc) from exc


def parse_study(doc: dict) -> StudyDesign:
    tz = _check_zone(doc.get("timezone", "UTC"), "study.timezone")
    periods = {}
    for name in ("baseline", "intervention"):
        span = doc.get(name)
        if not isinstance(span, (list, tuple)) or len(span) != 2:
            raise ConfigError(f"study.{name}: expected [start, end]")
        periods[name] = tuple(_parse_time(v, tz, f"study.{name}") for v in span)
    anchor = doc.get("window_anchor", "00:00")
    try:
        return StudyDesign(periods["baseline"], periods["intervention"],
                           float(doc.get("window_h", 12)), float(doc.get("cadence_h", 3)), tz,
                           time.fromisoformat(anchor))
    except (DesignError, ValueError) as exc:
        raise _fail("study", exc) from exc


def parse_schedule(doc: dict) -> ScheduleConfig:
    tz = _check_zone(doc.get("timezone", "UTC"), "schedule.timezone")
    try:
        hours = float(doc.get("interval_h", 1))
    except (TypeError, ValueError) as exc:
        raise _fail("schedule.interval_h", "must be a number") from exc
    if hours <= 0:
        raise ConfigError("schedule.interval_h: must be > 0")
    if "anchor" not in doc:
        raise ConfigError("schedule.anchor: required")
    anchor = _parse_time(doc["anchor"], tz, "schedule.anchor").astimezone(timezone.utc)
    return ScheduleConfig(timedelta(hours=hours), anchor, tz)


def config_from_dict(doc: dict, base_dir=".") -> Config:
    """Build and cross-validate a :class:`Config`."""
    base = Path(base_dir)
    if doc.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"version: unsupported config version {doc.get('version')!r}")
    grid = parse_grid(doc.get("grid"))
    provider = parse_provider(doc.get("provider"))

    arch = doc.get("archive", {})
    archive = ArchiveConfig(_resolve(base, arch.get("root", "archive")),
                            _check_zone(arch.get("timezone", "UTC"), "archive.timezone"),
                            bool(arch.get("safe_names", True)))

    pal_doc = doc.get("palette")
    try:
        if pal_doc is None:
            palette = default_palette()
        elif isinstance(pal_doc, dict):
            palette = CongestionPalette.from_dict(pal_doc)
        else:
            palette = load_palette(_resolve(base, pal_doc))
    except (PaletteError, KeyError, OSError) as exc:
        raise _fail("palette", exc) from exc

    sites = []
    if doc.get("sites") is not None:
        try:
            sites = rois_from_dict(_load_json_or_inline(base, doc["sites"], "sites"))
        except (RoiError, GeometryError, KeyError, TypeError) as exc:
            raise _fail("sites", exc) from exc
        for roi in sites:
            try:
                rasterize_roi(roi, grid)
            except RoiError as exc:
                raise _fail(f"sites[{roi.key_str}]", exc) from exc

    schedule = parse_schedule(doc["schedule"]) if doc.get("schedule") else None
    study = parse_study(doc["study"]) if doc.get("study") else None
    if schedule and study:
        cadence = timedelta(hours=study.cadence_h)
        if schedule.interval != cadence:
            logger.warning("schedule.interval_h differs from study.cadence_h")

    scenario = _resolve(base, doc["scenario"]) if doc.get("scenario") else None
    if provider.kind == "synthetic" and scenario is None:
        logger.debug("synthetic provider configured without a scenario")

    return Config(grid, provider, archive, palette, sites, schedule, study, scenario,
                  _resolve(base, doc.get("output_dir", "out")), base)


def load_config(path) -> Config:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"--config: cannot read {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--config: {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("--config: top level must be a JSON object")
    return config_from_dict(doc, path.parent)
