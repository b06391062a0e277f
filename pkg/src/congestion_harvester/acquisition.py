"""Tile acquisition: capture URLs, provider adapters, retries and grid captures."""
from __future__ import annotations

import io
import logging
import os
import shlex
import subprocess
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Protocol

import httpx
from PIL import Image, UnidentifiedImageError

from .geo_grid import GridSpec, TileDescriptor, plan_grid
from .tile_archive import ArchiveError, ArchiveHandle, encode_name

logger = logging.getLogger(__name__)

PROVIDER_KINDS = ("browser_subprocess", "http_endpoint", "synthetic")
API_KEY_PLACEHOLDER = "{api_key}"
DEFAULT_API_KEY_ENV = "TRAFFIC_API_KEY"
DEFAULT_BROWSER_COMMAND = (
    "{browser} --headless --disable-gpu --virtual-time-budget={virtual_time_budget} "
    "--window-size={n_pix},{n_pix} --screenshot={out_path} {url}"
)


class AcquisitionError(Exception):
    pass


class ConfigurationError(AcquisitionError):
    pass


class TransientFetchError(AcquisitionError):
    """Worth retrying: timeouts, throttling, server-side failures."""


class PermanentFetchError(AcquisitionError):
    """Retrying cannot help: bad image, wrong size, client errors."""


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "synthetic"
    endpoint: str = ""
    command: str = DEFAULT_BROWSER_COMMAND
    browser: str = "google-chrome"
    api_key_env: str = DEFAULT_API_KEY_ENV
    timeout_s: float = 60.0
    max_retries: int = 3
    backoff_base_s: float = 2.0
    max_concurrency: int = 4
    min_request_interval_ms: float = 0.0
    virtual_time_budget: int = 10_000_000

    def __post_init__(self):
        if self.kind not in PROVIDER_KINDS:
            raise ConfigurationError(f"provider kind {self.kind!r} not in {PROVIDER_KINDS}")
        if self.timeout_s <= 0:
            raise ConfigurationError("timeout_s must be > 0")
        if self.max_retries < 0:
            raise ConfigurationError("max_retries must be >= 0")
        if self.max_concurrency < 1:
            raise ConfigurationError("max_concurrency must be >= 1")
        if self.min_request_interval_ms < 0:
            raise ConfigurationError("min_request_interval_ms must be >= 0")


@dataclass(frozen=True)
class CaptureJob:
    tile: TileDescriptor
    requested_at: datetime
    url: str
    output_name: str


@dataclass
class CaptureReport:
    grid: dict
    timestamp: datetime
    succeeded: list[tuple[int, int]] = field(default_factory=list)
    failed: list[tuple[int, int, str]] = field(default_factory=list)
    retries: dict[tuple[int, int], int] = field(default_factory=dict)
    duration_s: float = 0.0
    scheduled_for: datetime | None = None
    skipped_ticks: list[datetime] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failed


def build_url(tile: TileDescriptor, cfg: ProviderConfig, environ=None) -> str:
    """``{endpoint}?lat=..&long=..&z=..&n=..`` with coordinates at 10 decimals.

    An ``{api_key}`` placeholder in the endpoint is filled from the environment
    variable named by ``cfg.api_key_env``.
    """
    environ = os.environ if environ is None else environ
    base = cfg.endpoint
    if API_KEY_PLACEHOLDER in base:
        key = environ.get(cfg.api_key_env)
        if not key:
            raise ConfigurationError(
                f"environment variable {cfg.api_key_env} must hold the API key")
        base = base.replace(API_KEY_PLACEHOLDER, key)
    sep = "&" if "?" in base else "?"
    return (f"{base}{sep}lat={tile.center.lat_deg:.10f}&long={tile.center.long_deg:.10f}"
            f"&z={tile.zoom}&n={tile.n_pix}")


def redact(url: str, cfg: ProviderConfig, environ=None) -> str:
    environ = os.environ if environ is None else environ
    key = environ.get(cfg.api_key_env)
    return url.replace(key, "***") if key else url


def make_jobs(spec: GridSpec, cfg: ProviderConfig, archive: ArchiveHandle,
              now: datetime, environ=None) -> list[CaptureJob]:
    return [
        CaptureJob(t, now, build_url(t, cfg, environ),
                   encode_name(t.i, t.j, now, archive.safe_names, archive.tz))
        for t in plan_grid(spec)
    ]


# ---------------------------------------------------------------------------
# providers


class TileProvider(Protocol):
    serial: bool

    def fetch(self, job: CaptureJob) -> bytes: ...


class BrowserProvider:
    """Screenshots the capture URL with a headless browser subprocess."""

    serial = True

    def __init__(self, cfg: ProviderConfig, workdir=None):
        self.cfg = cfg
        self.workdir = workdir

    def command(self, job: CaptureJob, out_path) -> list[str]:
        values = {
            "browser": self.cfg.browser,
            "url": job.url,
            "n_pix": job.tile.n_pix,
            "out_path": str(out_path),
            "virtual_time_budget": self.cfg.virtual_time_budget,
        }
        # substitute per token so URLs with '&' or '?' never reach a shell
        return [tok.format(**values) for tok in shlex.split(self.cfg.command)]

    def fetch(self, job: CaptureJob) -> bytes:
        with tempfile.TemporaryDirectory(dir=self.workdir) as tmp:
            out_path = Path(tmp) / job.output_name
            argv = self.command(job, out_path)
            try:
                proc = subprocess.run(argv, capture_output=True, timeout=self.cfg.timeout_s)
            except FileNotFoundError as exc:
                raise ConfigurationError(f"browser executable not found: {argv[0]}") from exc
            except subprocess.TimeoutExpired as exc:
                raise TransientFetchError(f"browser timed out after {self.cfg.timeout_s}s") from exc
            if proc.returncode != 0:
                raise TransientFetchError(
                    f"browser exited with {proc.returncode}: {proc.stderr[-300:].decode(errors='replace')}")
            if not out_path.exists():
                raise TransientFetchError("browser produced no screenshot")
            return out_path.read_bytes()


class HttpProvider:
    """GET on the capture URL; expects an ``image/png`` body."""

    serial = False

    def __init__(self, cfg: ProviderConfig, client: httpx.Client | None = None):
        self.cfg = cfg
        self.client = client or httpx.Client(timeout=cfg.timeout_s)

    def fetch(self, job: CaptureJob) -> bytes:
        try:
            resp = self.client.get(job.url, timeout=self.cfg.timeout_s)
        except httpx.TimeoutException as exc:
            raise TransientFetchError(f"timeout: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransientFetchError(f"transport error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientFetchError(f"HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise PermanentFetchError(f"HTTP {resp.status_code}")
        ctype = resp.headers.get("content-type", "")
        if not ctype.startswith("image/png"):
            raise PermanentFetchError(f"unexpected content-type {ctype!r}")
        return resp.content

    def close(self):
        self.client.close()


def make_provider(cfg: ProviderConfig, scenario=None) -> TileProvider:
    if cfg.kind == "browser_subprocess":
        return BrowserProvider(cfg)
    if cfg.kind == "http_endpoint":
        return HttpProvider(cfg)
    from .synthmap import SyntheticProvider

    if scenario is None:
        raise ConfigurationError("the synthetic provider needs a scenario")
    return SyntheticProvider(scenario)


# ---------------------------------------------------------------------------
# fetching


class RateLimiter:
    """Spaces successive call starts at least ``min_interval_s`` apart; thread-safe."""

    def __init__(self, min_interval_s: float, clock=time.monotonic, sleep=time.sleep):
        self.min_interval_s = min_interval_s
        self.clock = clock
        self.sleep = sleep
        self._lock = threading.Lock()
        self._next = None

    def wait(self) -> float:
        """Block until the next slot; returns the slot's start time."""
        with self._lock:
            now = self.clock()
            if self._next is not None and now < self._next:
                self.sleep(self._next - now)
                now = max(self.clock(), self._next)
            self._next = now + self.min_interval_s
            return now


def validate_png(data: bytes, n_pix: int):
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.verify()
        with Image.open(io.BytesIO(data)) as img:
            size = img.size
            fmt = img.format
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise PermanentFetchError(f"response is not a decodable image: {exc}") from exc
    if fmt != "PNG":
        raise PermanentFetchError(f"expected PNG, got {fmt}")
    if size != (n_pix, n_pix):
        raise PermanentFetchError(
            f"dimension mismatch: got {size[0]}x{size[1]}, expected {n_pix}x{n_pix}")


def fetch_tile(job: CaptureJob, cfg: ProviderConfig, provider: TileProvider,
               limiter: RateLimiter | None = None,
               sleep: Callable[[float], None] = time.sleep) -> tuple[bytes, int]:
    """Fetch and validate one tile; returns ``(png_bytes, retries_used)``.

    Transient failures are retried up to ``cfg.max_retries`` times with
    exponential backoff ``backoff_base_s * 2**attempt``.
    """
    attempt = 0
    while True:
        if limiter is not None:
            limiter.wait()
        try:
            data = provider.fetch(job)
            validate_png(data, job.tile.n_pix)
            return data, attempt
        except TransientFetchError as exc:
            if attempt >= cfg.max_retries:
                raise TransientFetchError(
                    f"gave up after {attempt + 1} attempts: {exc}") from exc
            delay = cfg.backoff_base_s * 2 ** attempt
            logger.info("tile (%d, %d) attempt %d failed (%s); retrying in %.1fs",
                        job.tile.i, job.tile.j, attempt + 1, exc, delay)
            sleep(delay)
            attempt += 1


def capture_grid(spec: GridSpec, cfg: ProviderConfig, archive: ArchiveHandle, now: datetime,
                 provider: TileProvider | None = None, *, scenario=None,
                 sleep: Callable[[float], None] = time.sleep,
                 limiter: RateLimiter | None = None) -> CaptureReport:
    """Fetch every planned tile under one shared timestamp and archive the results.

    Tile failures are recorded in the report and never abort the remaining
    tiles. An unwritable archive raises :class:`ArchiveError` before any fetch.
    """
    archive.check_writable()
    if now.tzinfo is None:
        now = now.replace(tzinfo=timezone.utc)
    provider = provider or make_provider(cfg, scenario)
    if limiter is None:
        limiter = RateLimiter(cfg.min_request_interval_ms / 1000.0)
    started = time.monotonic()
    report = CaptureReport(spec.summary(), now)
    jobs = make_jobs(spec, cfg, archive, now)
    workers = 1 if getattr(provider, "serial", False) else cfg.max_concurrency

    def run(job):
        try:
            data, retries = fetch_tile(job, cfg, provider, limiter, sleep)
        except AcquisitionError as exc:
            return job, None, None, exc
        return job, data, retries, None

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, jobs))

    for job, data, retries, exc in results:
        ij = (job.tile.i, job.tile.j)
        if exc is not None:
            if isinstance(exc, ConfigurationError):
                logger.error("tile %s configuration error: %s", ij, exc)
            report.failed.append((ij[0], ij[1], f"{type(exc).__name__}: {exc}"))
            logger.info("capture %s tile %s failed: %s", now.isoformat(), ij, exc)
            continue
        try:
            archive.write_tile(ij[0], ij[1], now, data)
        except OSError as exc:
            raise ArchiveError(f"cannot write tile {ij}: {exc}") from exc
        report.succeeded.append(ij)
        if retries:
            report.retries[ij] = retries
        logger.debug("capture %s tile %s ok (retries=%d)", now.isoformat(), ij, retries)
    report.duration_s = time.monotonic() - started
    logger.info("capture %s: %d ok, %d failed, %.2fs", now.isoformat(),
                len(report.succeeded), len(report.failed), report.duration_s)
    return report
