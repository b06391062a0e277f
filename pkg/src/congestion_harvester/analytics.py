"""Windowed CCC averages and baseline-vs-intervention comparisons."""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, time, timedelta, timezone
from pathlib import Path
from typing import NamedTuple
from zoneinfo import ZoneInfo

import numpy as np
from scipy import special, stats

from .congestion import CccObservation

logger = logging.getLogger(__name__)

OBSERVATION_FIELDS = ["timestamp_iso", "site_id", "segment_id", "ccc", "classified_fraction"]
REPORT_FIELDS = ["segment", "stratum", "baseline_mean", "baseline_sd", "baseline_n",
                 "intervention_mean", "intervention_sd", "intervention_n", "p_value"]
SERIES_FIELDS = ["segment", "window_start_iso", "mean_ccc", "count"]
STRATA = ("weekday", "weekend")
GRAY_CCC = 5
GRAY_HEAVY_FRACTION = 0.5


class DesignError(ValueError):
    pass


def zone(name) -> timezone | ZoneInfo:
    if isinstance(name, str):
        return timezone.utc if name.upper() == "UTC" else ZoneInfo(name)
    return name


@dataclass(frozen=True)
class StudyDesign:
    baseline: tuple[datetime, datetime]
    intervention: tuple[datetime, datetime]
    window_h: float = 12.0
    cadence_h: float = 3.0
    timezone: str = "UTC"
    window_anchor: time = time(0, 0)

    def __post_init__(self):
        for name in ("baseline", "intervention"):
            start, end = getattr(self, name)
            if start.tzinfo is None or end.tzinfo is None:
                raise DesignError(f"{name} bounds must be timezone-aware")
            if not start < end:
                raise DesignError(f"{name} start must precede its end")
        if self.baseline[1] > self.intervention[0]:
            raise DesignError("baseline must end on or before the intervention start")
        if self.window_h <= 0 or self.cadence_h <= 0:
            raise DesignError("window_h and cadence_h must be positive")
        ratio = self.window_h / self.cadence_h
        if abs(ratio - round(ratio)) > 1e-9:
            raise DesignError(
                f"window_h={self.window_h} is not a multiple of cadence_h={self.cadence_h}")

    @property
    def tz(self):
        return zone(self.timezone)

    @property
    def captures_per_window(self) -> int:
        return int(round(self.window_h / self.cadence_h))

    def period_of(self, ts: datetime) -> str | None:
        """``"baseline"``, ``"intervention"`` or None, with half-open periods."""
        if self.baseline[0] <= ts < self.baseline[1]:
            return "baseline"
        if self.intervention[0] <= ts < self.intervention[1]:
            return "intervention"
        return None


def window_start(ts: datetime, design: StudyDesign) -> datetime:
    """Start of the averaging window holding ``ts``.

    Windows tile each local day starting at ``design.window_anchor`` (midnight
    by default); a window never crosses the next day's anchor.
    """
    tz = design.tz
    local = ts.astimezone(tz).replace(tzinfo=None)
    anchor = datetime.combine(local.date(), design.window_anchor)
    if local < anchor:
        anchor -= timedelta(days=1)
    k = math.floor((local - anchor) / timedelta(hours=design.window_h))
    start = anchor + k * timedelta(hours=design.window_h)
    return start.replace(tzinfo=tz)


def stratum_of(day_start: datetime) -> str:
    return "weekend" if day_start.weekday() >= 5 else "weekday"


def segment_label(key: tuple[str, str]) -> str:
    return f"{key[0]}/{key[1]}"


class WindowMean(NamedTuple):
    start: datetime
    mean: float
    count: int
    n_gray: int = 0


@dataclass
class WindowedSeries:
    windows: dict[tuple[str, str], list[WindowMean]] = field(default_factory=dict)

    def segments(self) -> list[tuple[str, str]]:
        return sorted(self.windows)


def window_average(observations, design: StudyDesign) -> WindowedSeries:
    """Mean CCC per segment per window; missing observations are dropped."""
    buckets: dict = defaultdict(lambda: defaultdict(list))
    for obs in observations:
        if obs.ccc is None:
            continue
        buckets[obs.key][window_start(obs.timestamp, design)].append(obs.ccc)
    series = WindowedSeries()
    for key in sorted(buckets):
        series.windows[key] = [
            WindowMean(start, float(np.mean(vals)), len(vals), sum(v == GRAY_CCC for v in vals))
            for start, vals in sorted(buckets[key].items())
        ]
    return series


class StatResult(NamedTuple):
    statistic: float
    df: float
    p_value: float


def welch_ttest(x, y) -> StatResult:
    """Two-sided Welch unequal-variance t-test of ``mean(x) - mean(y)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = len(x), len(y)
    if nx < 2 or ny < 2:
        raise ValueError("Welch's test needs at least two values per sample")
    vx = x.var(ddof=1) / nx
    vy = y.var(ddof=1) / ny
    diff = x.mean() - y.mean()
    se2 = vx + vy
    if se2 == 0.0:
        if diff == 0.0:
            return StatResult(0.0, math.nan, 1.0)
        return StatResult(math.copysign(math.inf, diff), math.nan, 0.0)
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / (vx ** 2 / (nx - 1) + vy ** 2 / (ny - 1))
    p = 2.0 * special.stdtr(df, -abs(t))
    return StatResult(float(t), float(df), float(min(max(p, 0.0), 1.0)))


def mann_whitney(x, y) -> StatResult:
    res = stats.mannwhitneyu(x, y, alternative="two-sided")
    return StatResult(float(res.statistic), math.nan, float(res.pvalue))


TESTS = {"welch": welch_ttest, "mannwhitney": mann_whitney}


@dataclass(frozen=True)
class ComparisonRow:
    segment: tuple[str, str]
    stratum: str
    baseline_n: int
    intervention_n: int
    baseline_mean: float | None = None
    baseline_sd: float | None = None
    intervention_mean: float | None = None
    intervention_sd: float | None = None
    p_value: float | None = None
    statistic: float | None = None
    gray_heavy: bool = False

    @property
    def computable(self) -> bool:
        return self.p_value is not None

    @property
    def difference(self) -> float | None:
        if self.baseline_mean is None or self.intervention_mean is None:
            return None
        return self.intervention_mean - self.baseline_mean


@dataclass
class ComparisonReport:
    rows: list[ComparisonRow]
    test: str = "welch"
    unit: str = "window"

    def row(self, segment, stratum) -> ComparisonRow:
        for r in self.rows:
            if r.segment == tuple(segment) and r.stratum == stratum:
                return r
        raise KeyError((segment, stratum))

    def mean_difference(self, stratum: str) -> float:
        """Intervention minus baseline, averaged across computable segments."""
        diffs = [r.difference for r in self.rows if r.stratum == stratum and r.difference is not None]
        return float(np.mean(diffs)) if diffs else math.nan


def _describe(values):
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if len(arr) > 1 else None
    return float(arr.mean()), sd


def _compare_samples(samples, segments, test: str, unit: str) -> ComparisonReport:
    test_fn = TESTS[test]
    rows = []
    for key in segments:
        for stratum in STRATA:
            cell = samples.get((key, stratum), {})
            base = [v for v, _ in cell.get("baseline", [])]
            inter = [v for v, _ in cell.get("intervention", [])]
            gray = sum(g for _, g in cell.get("baseline", []) + cell.get("intervention", []))
            weight = sum(w for w in cell.get("weights", [])) or 1
            gray_heavy = gray / weight > GRAY_HEAVY_FRACTION
            if gray_heavy:
                logger.warning("%s %s: more than half of the observations are gray",
                               segment_label(key), stratum)
            b_mean, b_sd = _describe(base)
            i_mean, i_sd = _describe(inter)
            if len(base) < 2 or len(inter) < 2:
                rows.append(ComparisonRow(key, stratum, len(base), len(inter), b_mean, b_sd,
                                          i_mean, i_sd, gray_heavy=gray_heavy))
                continue
            res = test_fn(inter, base)
            rows.append(ComparisonRow(key, stratum, len(base), len(inter), b_mean, b_sd,
                                      i_mean, i_sd, res.p_value, res.statistic, gray_heavy))
    return ComparisonReport(rows, test, unit)


def compare(series: WindowedSeries, design: StudyDesign, test: str = "welch") -> ComparisonReport:
    """Weekday/weekend baseline-vs-intervention statistics over window means.

    A window belongs to the period and stratum of its start time. Cells with
    fewer than two windows on either side carry means/SDs where available but
    no p-value.
    """
    samples: dict = defaultdict(lambda: defaultdict(list))
    for key, windows in series.windows.items():
        for w in windows:
            period = design.period_of(w.start)
            if period is None:
                continue
            cell = samples[(key, stratum_of(w.start))]
            cell[period].append((w.mean, w.n_gray))
            cell["weights"].append(w.count)
    return _compare_samples(samples, series.segments(), test, "window")


def compare_observations(observations, design: StudyDesign, test: str = "welch") -> ComparisonReport:
    """Same as :func:`compare` but over raw capture-cadence observations."""
    samples: dict = defaultdict(lambda: defaultdict(list))
    keys = set()
    for obs in observations:
        if obs.ccc is None:
            continue
        keys.add(obs.key)
        period = design.period_of(obs.timestamp)
        if period is None:
            continue
        local = obs.timestamp.astimezone(design.tz)
        cell = samples[(obs.key, stratum_of(window_start(local, design)))]
        cell[period].append((float(obs.ccc), int(obs.ccc == GRAY_CCC)))
        cell["weights"].append(1)
    return _compare_samples(samples, sorted(keys), test, "observation")


# ---------------------------------------------------------------------------
# CSV and plot output


def _fmt(value, spec=".6f"):
    return "" if value is None else format(value, spec)


def write_observations_csv(observations, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(OBSERVATION_FIELDS)
        for o in sorted(observations, key=lambda o: (o.timestamp, o.site_id, o.segment_id)):
            fraction = "" if o.classified_fraction is None else f"{o.classified_fraction:.6f}"
            w.writerow([o.timestamp.isoformat(), o.site_id, o.segment_id,
                        "" if o.ccc is None else o.ccc, fraction])
    return path


def read_observations_csv(path) -> list[CccObservation]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            ts = datetime.fromisoformat(row["timestamp_iso"])
            if ts.tzinfo is None:
                ts = ts.replace(tzinfo=timezone.utc)
            ccc = int(row["ccc"]) if row["ccc"] else None
            frac = float(row["classified_fraction"]) if row["classified_fraction"] else None
            out.append(CccObservation(ts, row["site_id"], row["segment_id"], ccc, frac))
    return out


def write_series_csv(series: WindowedSeries, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SERIES_FIELDS)
        for key in series.segments():
            for win in series.windows[key]:
                w.writerow([segment_label(key), win.start.isoformat(), f"{win.mean:.6f}", win.count])
    return path


def write_report_csv(report: ComparisonReport, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for r in report.rows:
            w.writerow([segment_label(r.segment), r.stratum,
                        _fmt(r.baseline_mean), _fmt(r.baseline_sd), r.baseline_n,
                        _fmt(r.intervention_mean), _fmt(r.intervention_sd), r.intervention_n,
                        _fmt(r.p_value, ".6g")])
    return path


def read_report_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def plot_series(series: WindowedSeries, path, palette=None, design: StudyDesign | None = None,
                width_px: int = 1200, height_px: int = 800, dpi: int = 100) -> Path:
    """One panel per segment; each line piece takes the color of its CCC level."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.dates as mdates
    import matplotlib.pyplot as plt
    from matplotlib.collections import LineCollection

    from .congestion import default_palette

    palette = palette or default_palette()
    keys = series.segments()
    fig, axes = plt.subplots(max(len(keys), 1), 1, sharex=True, squeeze=False,
                             figsize=(width_px / dpi, height_px / dpi), dpi=dpi)
    for ax, key in zip(axes[:, 0], keys):
        wins = series.windows[key]
        x = mdates.date2num([w.start for w in wins])
        y = np.array([w.mean for w in wins])
        colors = [np.array(palette.rgb_of(int(min(max(round(v), 1), 5)))) / 255.0 for v in y]
        if len(x) > 1:
            pieces = np.stack([np.column_stack([x[:-1], y[:-1]]), np.column_stack([x[1:], y[1:]])], axis=1)
            ax.add_collection(LineCollection(pieces, colors=colors[:-1], linewidths=1.5))
        ax.scatter(x, y, c=colors, s=6, zorder=3)
        if design is not None:
            ax.axvline(mdates.date2num(design.intervention[0]), color="k", lw=0.8, ls="--")
        ax.set_ylim(0.8, 5.2)
        ax.set_ylabel(segment_label(key), fontsize=8)
        ax.xaxis_date()
        if len(x):
            ax.set_xlim(x.min(), x.max() if x.max() > x.min() else x.min() + 1)
    axes[-1, 0].set_xlabel("window start")
    fig.suptitle("Windowed mean congestion color code (lower = more congested)", fontsize=9)
    path = Path(path)
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    return path
