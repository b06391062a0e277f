"""Flat on-disk archive of captured tiles.

File names follow ``TrafficMap_{i}_{j}_{MM}_{DD}_{YY}_{HH}:{MM}.png``. With
safe names (the default) the colon becomes ``-``. The reader accepts both
forms, plus a double underscore before the time, and parses ``i``/``j`` as
whole underscore-delimited tokens.
"""
from __future__ import annotations

import json
import logging
import os
import re
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone, tzinfo
from pathlib import Path
from zoneinfo import ZoneInfo

logger = logging.getLogger(__name__)

PREFIX = "TrafficMap"
MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

_NAME_RE = re.compile(
    r"^TrafficMap_(\d+)_(\d+)_(\d{2})_(\d{2})_(\d{2})__?(\d{2})[:\-](\d{2})\.png$"
)


class ArchiveError(OSError):
    pass


class BadTileName(ValueError):
    """Raised for file names that do not decode."""


@dataclass(frozen=True)
class TileFileName:
    i: int
    j: int
    month: int
    day: int
    year2: int
    hour: int
    minute: int

    def __post_init__(self):
        if self.i < 1 or self.j < 1:
            raise ValueError(f"tile indices must be >= 1, got ({self.i}, {self.j})")
        if not 0 <= self.year2 <= 99:
            raise ValueError(f"year2={self.year2} outside 0..99")
        # validates the calendar fields
        self.timestamp

    def render(self, safe: bool = True) -> str:
        sep = "-" if safe else ":"
        return (f"{PREFIX}_{self.i}_{self.j}_{self.month:02d}_{self.day:02d}_{self.year2:02d}"
                f"_{self.hour:02d}{sep}{self.minute:02d}.png")

    @property
    def timestamp(self) -> datetime:
        """Naive wall-clock time in the archive's timezone."""
        return datetime(2000 + self.year2, self.month, self.day, self.hour, self.minute)

    @classmethod
    def from_timestamp(cls, i: int, j: int, ts: datetime) -> "TileFileName":
        if ts.year < 2000 or ts.year > 2099:
            raise ValueError(f"year {ts.year} not representable with two digits")
        return cls(i, j, ts.month, ts.day, ts.year - 2000, ts.hour, ts.minute)

    @classmethod
    def parse(cls, name: str) -> "TileFileName":
        m = _NAME_RE.match(name)
        if not m:
            raise BadTileName(f"not a tile file name: {name!r}")
        i, j, mo, dd, yy, hh, mi = (int(g) for g in m.groups())
        try:
            return cls(i, j, mo, dd, yy, hh, mi)
        except ValueError as exc:
            raise BadTileName(f"bad calendar fields in {name!r}: {exc}") from exc


def _zone(tz) -> tzinfo:
    if tz is None:
        return timezone.utc
    if isinstance(tz, str):
        return timezone.utc if tz.upper() == "UTC" else ZoneInfo(tz)
    return tz


def to_archive_clock(ts: datetime, tz=None) -> datetime:
    """Naive minute-resolution wall-clock time as it appears in file names."""
    if ts.tzinfo is not None:
        ts = ts.astimezone(_zone(tz)).replace(tzinfo=None)
    return ts.replace(second=0, microsecond=0)


def encode_name(i: int, j: int, timestamp: datetime, safe: bool = True, tz=None) -> str:
    return TileFileName.from_timestamp(i, j, to_archive_clock(timestamp, tz)).render(safe)


def parse_name(name: str) -> tuple[int, int, datetime]:
    f = TileFileName.parse(name)
    return f.i, f.j, f.timestamp


@dataclass
class ArchiveHandle:
    root: Path
    tz: tzinfo = timezone.utc
    safe_names: bool = True
    manifest: dict[datetime, dict[tuple[int, int], Path]] = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        self.tz = _zone(self.tz)

    def clock(self, ts: datetime) -> datetime:
        return to_archive_clock(ts, self.tz)

    def aware(self, naive: datetime) -> datetime:
        """Attach the archive timezone to a file-name timestamp."""
        return naive.replace(tzinfo=self.tz)

    def timestamps(self) -> list[datetime]:
        return sorted(self.manifest)

    def check_writable(self):
        if not self.root.is_dir():
            raise ArchiveError(f"archive root {self.root} does not exist")
        if not os.access(self.root, os.W_OK):
            raise ArchiveError(f"archive root {self.root} is not writable")

    def write_tile(self, i: int, j: int, timestamp: datetime, data: bytes) -> Path:
        """Write one tile atomically and record it in the manifest."""
        name = encode_name(i, j, timestamp, self.safe_names, self.tz)
        path = self.root / name
        fd, tmp = tempfile.mkstemp(prefix=".tmp_", suffix=".png", dir=self.root)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.manifest.setdefault(self.clock(timestamp), {})[(i, j)] = path
        return path


def scan(root, tz=None, safe_names: bool = True) -> ArchiveHandle:
    """Index every decodable tile file directly under ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise ArchiveError(f"archive root {root} does not exist")
    handle = ArchiveHandle(root, _zone(tz), safe_names)
    for entry in sorted(os.scandir(root), key=lambda e: e.name):
        if not entry.is_file() or not entry.name.startswith(PREFIX):
            continue
        try:
            i, j, ts = parse_name(entry.name)
        except BadTileName as exc:
            logger.warning("skipping undecodable archive file: %s", exc)
            continue
        tiles = handle.manifest.setdefault(ts, {})
        if (i, j) in tiles:
            logger.warning("duplicate tile (%d, %d) at %s: keeping %s, ignoring %s",
                           i, j, ts, tiles[(i, j)].name, entry.name)
            continue
        tiles[(i, j)] = Path(entry.path)
    return handle


def lookup(handle: ArchiveHandle, timestamp: datetime) -> dict[tuple[int, int], Path]:
    """Tiles of one capture; an empty dict when nothing was archived at that time."""
    return dict(handle.manifest.get(handle.clock(timestamp), {}))


def manifest_to_json(handle: ArchiveHandle) -> dict:
    return {
        "version": MANIFEST_VERSION,
        "timezone": str(handle.tz),
        "safe_names": handle.safe_names,
        "captures": {
            ts.strftime("%Y-%m-%dT%H:%M"): {
                f"{i}_{j}": path.name for (i, j), path in sorted(tiles.items())
            }
            for ts, tiles in sorted(handle.manifest.items())
        },
    }


def save_manifest(handle: ArchiveHandle, path=None) -> Path:
    """Cache the manifest as JSON. It is never authoritative; :func:`scan` rebuilds it."""
    path = Path(path) if path else handle.root / MANIFEST_NAME
    path.write_text(json.dumps(manifest_to_json(handle), indent=1))
    return path


def load_manifest(root, path=None) -> ArchiveHandle:
    root = Path(root)
    path = Path(path) if path else root / MANIFEST_NAME
    doc = json.loads(path.read_text())
    if doc.get("version") != MANIFEST_VERSION:
        raise ArchiveError(f"unsupported manifest version {doc.get('version')!r}")
    handle = ArchiveHandle(root, _zone(doc.get("timezone")), doc.get("safe_names", True))
    for key, tiles in doc["captures"].items():
        ts = datetime.strptime(key, "%Y-%m-%dT%H:%M")
        handle.manifest[ts] = {
            tuple(int(x) for x in ij.split("_")): root / name for ij, name in tiles.items()
        }
    return handle
