"""Drift-free periodic captures.

Tick ``k`` fires at ``anchor + k * interval`` regardless of how long earlier
captures took. A tick that arrives while a capture is still running is skipped
and logged; captures never overlap.
"""
from __future__ import annotations

import logging
import math
import threading
import time
from datetime import datetime, timedelta, timezone
from typing import Callable, Iterator

from .acquisition import CaptureReport, ProviderConfig, capture_grid
from .geo_grid import GridSpec
from .tile_archive import ArchiveHandle

logger = logging.getLogger(__name__)


class SystemClock:
    def __init__(self, stop: threading.Event | None = None):
        self.stop = stop or threading.Event()

    def now(self) -> datetime:
        return datetime.now(timezone.utc)

    def sleep_until(self, t: datetime) -> bool:
        """Sleep until ``t``; False if interrupted by the stop event."""
        while True:
            remaining = (t - self.now()).total_seconds()
            if remaining <= 0:
                return True
            if self.stop.wait(min(remaining, 60.0)):
                return False


class SimulatedClock:
    """Manually advanced clock; sleeping jumps straight to the target time."""

    def __init__(self, start: datetime):
        self._now = start
        self.stop = threading.Event()

    def now(self) -> datetime:
        return self._now

    def advance(self, seconds: float):
        self._now += timedelta(seconds=seconds)

    def sleep_until(self, t: datetime) -> bool:
        if self.stop.is_set():
            return False
        if t > self._now:
            self._now = t
        return True


def tick_time(anchor: datetime, interval: timedelta, k: int) -> datetime:
    return anchor + k * interval


def first_tick_at_or_after(anchor: datetime, interval: timedelta, t: datetime) -> int:
    if t <= anchor:
        return 0
    return math.ceil((t - anchor) / interval)


def run_schedule(spec: GridSpec, cfg: ProviderConfig, archive: ArchiveHandle,
                 interval: timedelta, anchor: datetime, until: datetime | None = None, *,
                 clock=None, capture: Callable[..., CaptureReport] | None = None,
                 provider=None, scenario=None,
                 sleep: Callable[[float], None] = time.sleep) -> Iterator[CaptureReport]:
    """Yield one :class:`CaptureReport` per fired tick.

    Ticks strictly before the clock's current time at start-up are not
    considered missed. Runs until ``until`` (exclusive) or until the clock's
    stop event is set. Capture exceptions are logged and the loop continues.
    """
    if interval <= timedelta(0):
        raise ValueError("interval must be positive")
    clock = clock or SystemClock()
    if capture is None:
        def capture(now):
            return capture_grid(spec, cfg, archive, now, provider, scenario=scenario, sleep=sleep)

    k = first_tick_at_or_after(anchor, interval, clock.now())
    skipped: list[datetime] = []
    while not clock.stop.is_set():
        tick = tick_time(anchor, interval, k)
        if until is not None and tick >= until:
            break
        if not clock.sleep_until(tick):
            break
        try:
            report = capture(clock.now())
        except Exception:
            logger.exception("capture for tick %s failed", tick.isoformat())
            report = None
        finished = clock.now()
        if report is not None:
            report.scheduled_for = tick
            report.skipped_ticks = skipped
            skipped = []
            yield report
        k += 1
        while tick_time(anchor, interval, k) < finished:
            missed = tick_time(anchor, interval, k)
            if until is not None and missed >= until:
                break
            logger.warning("skipping tick %s: previous capture still running", missed.isoformat())
            skipped.append(missed)
            k += 1
    if skipped:
        logger.warning("%d tick(s) skipped before the schedule ended", len(skipped))


def crontab_line(interval: timedelta, anchor: datetime, command: str) -> str:
    """Equivalent crontab entry for intervals that cron can express."""
    minutes = interval.total_seconds() / 60
    if minutes != int(minutes) or minutes <= 0:
        raise ValueError("cron needs a whole number of minutes")
    minutes = int(minutes)
    if minutes < 60:
        if 60 % minutes:
            raise ValueError(f"an interval of {minutes} min does not divide the hour")
        offsets = ",".join(str(m) for m in range(anchor.minute % minutes, 60, minutes))
        return f"{offsets} * * * * {command}"
    if minutes % 60 or 24 % (minutes // 60):
        raise ValueError(f"an interval of {minutes} min does not divide the day into whole hours")
    hours = minutes // 60
    hour_field = "*" if hours == 1 else ",".join(
        str(h) for h in range(anchor.hour % hours, 24, hours))
    return f"{anchor.minute} {hour_field} * * * {command}"
