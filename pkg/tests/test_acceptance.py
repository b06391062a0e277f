"""Acceptance checks, one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s -v`` to see the verdict lines.
"""
from __future__ import annotations

import csv
import math
import shutil
import time
from datetime import datetime, timedelta, timezone
from importlib import resources

import numpy as np
import pytest

from congestion_harvester.acquisition import CaptureReport, ProviderConfig
from congestion_harvester.analytics import (read_observations_csv, read_report_csv, welch_ttest)
from congestion_harvester.cli import main
from congestion_harvester.geo_grid import (EQUATORIAL_RADIUS_M, angular_spans, bounds, grid_spec,
                                           pixel_size, plan_grid, tile_block, tile_center)
from congestion_harvester.mosaic import decode_png, encode_png, split, stitch
from congestion_harvester.scheduler import SimulatedClock, run_schedule
from congestion_harvester.tile_archive import ArchiveHandle, encode_name, parse_name

from .conftest import NYC_EXCLUDED


@pytest.fixture
def verdict(capsys):
    def emit(number: int, title: str, ok: bool, detail: str = ""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else ""))
        assert ok, f"criterion {number}: {title} {detail}"
    return emit


def test_c01_tile_side_length(verdict):
    side_km = angular_spans(grid_spec((40.7, -74.0), 15, 1000, 1, 1)).side_m / 1000
    verdict(1, "tile side at 40.7 deg, z15, 1000 px is 3.6 +- 0.05 km", abs(side_km - 3.6) <= 0.05,
            f"{side_km:.4f} km")


def test_c02_base_pixel(verdict):
    base = pixel_size(24, 0.0)
    circumference = base * 2 ** 32
    ok = abs(base * 1000 - 9.3) <= 0.05 and abs(circumference - 2 * math.pi * EQUATORIAL_RADIUS_M) <= 1.0 \
        and abs(circumference - 40_075_016.7) <= 1.0
    verdict(2, "base pixel 9.3 +- 0.05 mm and 2^32 pixels span the equator +- 1 m", ok,
            f"{base * 1000:.4f} mm, {circumference:.2f} m")


def test_c03_geometry_properties(verdict):
    rng = np.random.default_rng(20200601)
    failures = []
    n_specs = 0
    t0 = time.perf_counter()
    while n_specs < 1000:
        lat = float(rng.uniform(-60, 60))
        lon = float(rng.uniform(-170, 170))
        zoom = int(rng.integers(10, 16))
        n_pix = int(rng.integers(500, 2001))
        n_lat, n_long = int(rng.integers(1, 8)), int(rng.integers(1, 8))
        spec = grid_spec((lat, lon), zoom, n_pix, n_lat, n_long)
        s, w, n, e = bounds(spec)
        if max(abs(s), abs(n)) > 85 or max(abs(w), abs(e)) >= 180:
            continue
        n_specs += 1
        spans = angular_spans(spec)
        # doubling law
        if not math.isclose(pixel_size(zoom - 1, lat), 2 * pixel_size(zoom, lat), rel_tol=1e-12):
            failures.append(("doubling", spec))
        # cosine cancellation: the longitude span does not depend on latitude
        # and the latitude span is the longitude span scaled by cos(lat)
        if angular_spans(grid_spec((0.0, lon), zoom, n_pix, 1, 1)).d_long_deg != spans.d_long_deg:
            failures.append(("cos-long", spec))
        if not math.isclose(spans.d_lat_deg / spans.d_long_deg, math.cos(math.radians(lat)), rel_tol=1e-12):
            failures.append(("cos-lat", spec))
        centers = [tile_center(spec, i, j) for i in range(1, n_lat + 1) for j in range(1, n_long + 1)]
        # centering: the grid's centroid is the requested center
        if not (math.isclose(np.mean([c.lat_deg for c in centers]), lat, rel_tol=0, abs_tol=1e-12 * max(1, abs(lat)))
                and math.isclose(np.mean([c.long_deg for c in centers]), lon, rel_tol=0,
                                 abs_tol=1e-12 * max(1, abs(lon)))):
            failures.append(("centering", spec))
        # abutment: neighbours are exactly one span apart
        for i in range(1, n_lat):
            d = tile_center(spec, i + 1, 1).lat_deg - tile_center(spec, i, 1).lat_deg
            if not math.isclose(d, spans.d_lat_deg, rel_tol=1e-12):
                failures.append(("abut-lat", spec))
        for j in range(1, n_long):
            d = tile_center(spec, 1, j + 1).long_deg - tile_center(spec, 1, j).long_deg
            if not math.isclose(d, spans.d_long_deg, rel_tol=1e-12):
                failures.append(("abut-long", spec))
    elapsed = time.perf_counter() - t0
    verdict(3, "doubling, cosine cancellation, centering and abutment over 1000 random specs",
            not failures and elapsed < 10, f"{len(failures)} failures, {elapsed:.2f} s")


def test_c04_plan_cardinality(verdict):
    nyc = len(plan_grid(grid_spec((40.79, -73.97), 15, 1000, 6, 3, NYC_EXCLUDED)))
    mexico = len(plan_grid(grid_spec((19.43, -99.13), 15, 1000, 3, 3)))
    verdict(4, "NYC 6x3 with 6 exclusions plans 12 jobs, Mexico City 3x3 plans 9",
            nyc == 12 and mexico == 9, f"{nyc}, {mexico}")


def test_c05_stitch_roundtrip(verdict):
    spec = grid_spec((19.43, -99.13), 15, 1000, 3, 2)
    rng = np.random.default_rng(5)
    # blocky content plus noise so every tile is distinguishable
    reference = np.repeat(np.repeat(rng.integers(0, 256, (30, 20, 3), dtype=np.uint8), 100, 0), 100, 1)
    reference[::7, ::5] = rng.integers(0, 256, reference[::7, ::5].shape, dtype=np.uint8)
    ref_png = encode_png(reference)
    t0 = time.perf_counter()
    tiles = {ij: encode_png(a) for ij, a in split(decode_png(ref_png), spec).items()}
    mosaic = stitch(tiles, spec)
    same_bytes = encode_png(mosaic.pixels) == ref_png
    rows, cols = tile_block(spec, spec.n_lat, 1)
    top_left = rows.start == 0 and cols.start == 0 and \
        np.array_equal(decode_png(tiles[(spec.n_lat, 1)]), reference[:1000, :1000])
    bottom_right = np.array_equal(decode_png(tiles[(1, spec.n_long)]), reference[-1000:, -1000:])
    elapsed = time.perf_counter() - t0
    verdict(5, "3000x2000 PNG split and stitched byte-for-byte, tile (n_lat, 1) top-left",
            same_bytes and top_left and bottom_right and mosaic.shape == (3000, 2000) and elapsed < 5,
            f"{elapsed:.2f} s")


def test_c06_filename_codec(verdict):
    rng = np.random.default_rng(6)
    base = datetime(2000, 1, 1)
    span_min = int((datetime(2099, 12, 31, 23, 59) - base).total_seconds() // 60)
    t0 = time.perf_counter()
    failures = 0
    for k in range(10_000):
        i, j = int(rng.integers(1, 100)), int(rng.integers(1, 100))
        ts = base + timedelta(minutes=int(rng.integers(0, span_min)))
        name = encode_name(i, j, ts, safe=bool(k % 2))
        failures += parse_name(name) != (i, j, ts)
    literal = encode_name(2, 3, datetime(2020, 6, 1, 9, 0), safe=False)
    literal_ok = literal == "TrafficMap_2_3_06_01_20_09:00.png" and \
        parse_name(literal) == (2, 3, datetime(2020, 6, 1, 9, 0))
    elapsed = time.perf_counter() - t0
    verdict(6, "10,000 random names round-trip, literal example name reproduced",
            failures == 0 and literal_ok and elapsed < 5, f"{failures} failures, {literal}, {elapsed:.2f} s")


@pytest.fixture(scope="module")
def oracle_study(tmp_path_factory):
    """28-day synthetic study run through the command line: render, archive, extract, analyze."""
    d = tmp_path_factory.mktemp("oracle")
    src = resources.files("congestion_harvester").joinpath("data/demo")
    for name in ("config.json", "scenario.json", "sites.json"):
        shutil.copyfile(src.joinpath(name), d / name)
    cfg = str(d / "config.json")
    t0 = time.perf_counter()
    codes = [main(["--config", cfg, *argv]) for argv in (["synth", "--populate"], ["extract"], ["analyze"])]
    return d, codes, time.perf_counter() - t0


def test_c07_oracle_study(oracle_study, verdict):
    d, codes, elapsed = oracle_study
    truth = read_observations_csv(d / "out" / "ground_truth.csv")
    observed = read_observations_csv(d / "out" / "observations.csv")
    key = lambda o: (o.timestamp, o.site_id, o.segment_id)
    exact = len(truth) == 28 * 8 * 4 and {key(o): o.ccc for o in observed} == {key(o): o.ccc for o in truth} \
        and all(o.ccc is not None for o in truth)
    rows = read_report_csv(d / "out" / "report.csv")
    weekday = [r for r in rows if r["stratum"] == "weekday"]
    weekend = [r for r in rows if r["stratum"] == "weekend"]
    diffs = [float(r["intervention_mean"]) - float(r["baseline_mean"]) for r in weekday]
    mean_diff = float(np.mean(diffs))
    weekday_p = max(float(r["p_value"]) for r in weekday)
    weekend_p = min(float(r["p_value"]) for r in weekend)
    ok = codes == [0, 0, 0] and exact and abs(mean_diff - 0.2) <= 0.05 \
        and all(abs(x - 0.2) <= 0.05 for x in diffs) and weekday_p < 0.05 and weekend_p > 0.3 and elapsed < 60
    verdict(7, "28-day oracle study recovers truth exactly, weekday +0.2 significant, weekend not", ok,
            f"diff {mean_diff:+.3f}, max weekday p {weekday_p:.3g}, min weekend p {weekend_p:.3g}, "
            f"{elapsed:.1f} s")


def test_c08_welch(verdict):
    x = [3.75, 4.0, 3.5, 4.25, 3.75, 4.0]
    y = [3.5, 3.25, 3.75, 3.5, 3.25]
    # manual evaluation of the Welch statistic and degrees of freedom
    mx, my = sum(x) / len(x), sum(y) / len(y)
    vx = sum((v - mx) ** 2 for v in x) / (len(x) - 1)
    vy = sum((v - my) ** 2 for v in y) / (len(y) - 1)
    a, b = vx / len(x), vy / len(y)
    t_manual = (mx - my) / math.sqrt(a + b)
    df_manual = (a + b) ** 2 / (a ** 2 / (len(x) - 1) + b ** 2 / (len(y) - 1))
    # two-sided p from the regularized incomplete beta, evaluated at 50 digits
    p_oracle = 0.015217827554532864
    res = welch_ttest(x, y)
    ok = abs(res.statistic - t_manual) <= 1e-6 and abs(res.df - df_manual) <= 1e-6 \
        and abs(res.p_value - p_oracle) <= 1e-6
    verdict(8, "Welch t and p match the hand-computed example to 1e-6", ok,
            f"t {res.statistic:.9f} vs {t_manual:.9f}, p {res.p_value:.9f} vs {p_oracle:.9f}")


def test_c09_scheduler(verdict):
    midnight = datetime(2020, 3, 1, tzinfo=timezone.utc)
    interval = timedelta(hours=3)
    spec = grid_spec((0, 0), 10, 8, 1, 1)
    t0 = time.perf_counter()

    def run(durations, until):
        clock = SimulatedClock(midnight)
        spans = []

        def capture(now):
            start = clock.now()
            clock.advance(durations.get(len(spans), 60.0))
            spans.append((start, clock.now()))
            return CaptureReport({}, now)
        reports = list(run_schedule(spec, ProviderConfig(), ArchiveHandle("."), interval, midnight, until,
                                    clock=clock, capture=capture))
        return reports, spans

    reports, _ = run({}, midnight + timedelta(days=7))
    per_day = {}
    for r in reports:
        per_day[r.scheduled_for.date()] = per_day.get(r.scheduled_for.date(), 0) + 1
    drift_free = all(r.scheduled_for == midnight + k * interval and r.timestamp == r.scheduled_for
                     for k, r in enumerate(reports))
    eight = sorted(set(per_day.values())) == [8] and len(per_day) == 7

    slow, spans = run({0: 2.5 * interval.total_seconds()}, midnight + timedelta(hours=15))
    skips = [r.scheduled_for.hour for r in slow] == [0, 9, 12] and len(slow[1].skipped_ticks) == 2
    no_overlap = all(s1 >= e0 for (_, e0), (s1, _) in zip(spans, spans[1:]))
    elapsed = time.perf_counter() - t0
    verdict(9, "simulated clock: 8 drift-free ticks per day, slow capture skips ticks without overlap",
            drift_free and eight and skips and no_overlap and elapsed < 5, f"{elapsed:.2f} s")


def test_c10_report_shape(oracle_study, verdict):
    d, codes, _ = oracle_study
    with open(d / "out" / "report.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        rows = list(reader)
    segments = {r["segment"] for r in rows}
    strata = {r["stratum"] for r in rows}
    needed = {"baseline_mean", "baseline_sd", "baseline_n", "intervention_mean", "intervention_sd",
              "intervention_n", "p_value"}
    complete = all(r[c] not in ("", None) for r in rows for c in needed)
    ok = codes[-1] == 0 and len(segments) == 4 and strata == {"weekday", "weekend"} and len(rows) == 8 \
        and needed <= set(header) and complete
    verdict(10, "analyze emits 4 segments x 2 strata with mean/SD/n/p columns", ok,
            f"{len(segments)} segments, {sorted(strata)}, columns {header}")
