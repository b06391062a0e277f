from __future__ import annotations

import csv
import math
from datetime import datetime, time, timedelta, timezone
from zoneinfo import ZoneInfo

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from mpmath import betainc, mp, mpf
from PIL import Image

from congestion_harvester.analytics import (REPORT_FIELDS, DesignError, StudyDesign, WindowedSeries,
                                            compare, compare_observations, mann_whitney, plot_series,
                                            read_observations_csv, read_report_csv, stratum_of,
                                            welch_ttest, window_average, window_start,
                                            write_observations_csv, write_report_csv, write_series_csv)
from congestion_harvester.congestion import CccObservation

NY = ZoneInfo("America/New_York")
UTC = timezone.utc

# Welch example evaluated by hand in 40-digit arithmetic
WELCH_X = [3.75, 4.0, 3.5, 4.25, 3.75, 4.0]
WELCH_Y = [3.5, 3.25, 3.75, 3.5, 3.25]
WELCH_T = 2.989672946978800759
WELCH_DF = 8.995219885277246654
WELCH_P = 0.015217827554532864


def _design(tz="America/New_York", days=28):
    z = ZoneInfo(tz) if tz != "UTC" else UTC
    start = datetime(2020, 1, 6, tzinfo=z)  # a Monday
    mid = start + timedelta(days=days // 2)
    return StudyDesign((start, mid), (mid, start + timedelta(days=days)), timezone=tz)


def _obs(ts, ccc, site="A", seg="main"):
    return CccObservation(ts, site, seg, ccc, 1.0 if ccc else 0.0)


def _series(design, fn, key=("A", "main")):
    """Observations every 3 h over the whole design with ccc = fn(ts)."""
    out = []
    t = design.baseline[0]
    while t < design.intervention[1]:
        out.append(_obs(t.astimezone(UTC), fn(t), *key))
        t += timedelta(hours=3)
    return out


# -- Welch --------------------------------------------------------------------

def test_welch_frozen_values_match_mpmath():
    mp.dps = 40
    x = [mpf(v) for v in WELCH_X]
    y = [mpf(v) for v in WELCH_Y]
    mx, my = sum(x) / len(x), sum(y) / len(y)
    vx = sum((v - mx) ** 2 for v in x) / (len(x) - 1)
    vy = sum((v - my) ** 2 for v in y) / (len(y) - 1)
    se2 = vx / len(x) + vy / len(y)
    t = (mx - my) / mp.sqrt(se2)
    df = se2 ** 2 / ((vx / len(x)) ** 2 / (len(x) - 1) + (vy / len(y)) ** 2 / (len(y) - 1))
    p = betainc(df / 2, mpf(1) / 2, 0, df / (df + t * t), regularized=True)
    assert float(t) == pytest.approx(WELCH_T, abs=1e-15)
    assert float(df) == pytest.approx(WELCH_DF, abs=1e-15)
    assert float(p) == pytest.approx(WELCH_P, abs=1e-15)


def test_welch_hand_example():
    res = welch_ttest(WELCH_X, WELCH_Y)
    assert res.statistic == pytest.approx(WELCH_T, abs=1e-6)
    assert res.df == pytest.approx(WELCH_DF, abs=1e-6)
    assert res.p_value == pytest.approx(WELCH_P, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1, 5), min_size=2, max_size=20), st.lists(st.floats(1, 5), min_size=2, max_size=20))
def test_welch_symmetric(x, y):
    a, b = welch_ttest(x, y), welch_ttest(y, x)
    assert a.p_value == pytest.approx(b.p_value, abs=1e-12)
    assert 0.0 <= a.p_value <= 1.0


def test_welch_identical_samples():
    assert welch_ttest([3, 4, 3.5], [3, 4, 3.5]).p_value == pytest.approx(1.0)
    assert welch_ttest([3, 3], [3, 3]).p_value == 1.0
    assert welch_ttest([3, 3], [4, 4]).p_value == 0.0


def test_welch_needs_two_values():
    with pytest.raises(ValueError):
        welch_ttest([1.0], [1.0, 2.0])


def test_mann_whitney_runs():
    res = mann_whitney([1, 2, 3, 4], [5, 6, 7, 8])
    assert res.p_value < 0.05


# -- design and windows -------------------------------------------------------

def test_design_validation():
    t = datetime(2020, 1, 1, tzinfo=UTC)
    d = timedelta(days=1)
    with pytest.raises(DesignError, match="overlap|before"):
        StudyDesign((t, t + 2 * d), (t + d, t + 3 * d))
    with pytest.raises(DesignError, match="multiple"):
        StudyDesign((t, t + d), (t + d, t + 2 * d), window_h=12, cadence_h=5)
    with pytest.raises(DesignError, match="aware"):
        StudyDesign((datetime(2020, 1, 1), t + d), (t + d, t + 2 * d))


def test_half_open_periods():
    design = _design()
    boundary = design.intervention[0]
    assert design.period_of(boundary - timedelta(seconds=1)) == "baseline"
    assert design.period_of(boundary) == "intervention"
    assert design.period_of(design.intervention[1]) is None


@pytest.mark.parametrize("local_hour,expected_hour", [(0, 0), (9, 0), (11, 0), (12, 12), (21, 12)])
def test_windows_aligned_to_local_midnight(local_hour, expected_hour):
    design = _design()
    ts = datetime(2020, 1, 8, local_hour, tzinfo=NY).astimezone(UTC)
    start = window_start(ts, design)
    assert start.astimezone(NY).replace(tzinfo=None) == datetime(2020, 1, 8, expected_hour)


def test_window_anchor_override():
    base = _design()
    design = StudyDesign(base.baseline, base.intervention, timezone=base.timezone, window_anchor=time(6))
    ts = datetime(2020, 1, 8, 3, tzinfo=NY)
    assert window_start(ts, design).replace(tzinfo=None) == datetime(2020, 1, 7, 18)


def test_window_mean_example():
    design = _design()
    t0 = datetime(2020, 1, 7, tzinfo=NY)
    obs = [_obs(t0 + timedelta(hours=3 * k), v) for k, v in enumerate([3, 3, 4, 4])]
    series = window_average(obs, design)
    (w,) = series.windows[("A", "main")]
    assert w.mean == 3.5 and w.count == 4


def test_all_missing_window_omitted():
    design = _design()
    t0 = datetime(2020, 1, 7, tzinfo=NY)
    obs = [_obs(t0 + timedelta(hours=3 * k), None) for k in range(4)]
    obs.append(_obs(t0 + timedelta(hours=12), 2))
    wins = window_average(obs, design).windows[("A", "main")]
    assert [w.start.hour for w in wins] == [12]


def test_window_means_bounded_and_counts_capped():
    design = _design()
    rng = np.random.default_rng(3)
    series = window_average(_series(design, lambda t: int(rng.integers(1, 6))), design)
    for w in series.windows[("A", "main")]:
        assert 1 <= w.mean <= 5 and w.count <= design.captures_per_window


def test_strata_partition():
    design = _design()
    series = window_average(_series(design, lambda t: 3), design)
    strata = [stratum_of(w.start) for w in series.windows[("A", "main")]]
    assert strata.count("weekday") == 20 * 2
    assert strata.count("weekend") == 8 * 2


# -- comparison ---------------------------------------------------------------

def _shifted(design, shift):
    rng = np.random.default_rng(11)

    def value(t):
        base = int(rng.choice([3, 4]))
        return base + (shift if design.period_of(t) == "intervention" else 0)
    return value


def test_null_case():
    design = _design()
    obs = _series(design, lambda t: 3 + (t.hour // 3) % 2)
    report = compare(window_average(obs, design), design)
    for stratum in ("weekday", "weekend"):
        row = report.row(("A", "main"), stratum)
        assert row.difference == 0.0
        assert row.p_value == pytest.approx(1.0)


def test_shift_equivariance():
    design = _design()
    base = _series(design, _shifted(design, 0))
    shifted = [CccObservation(o.timestamp, o.site_id, o.segment_id,
                              o.ccc + (1 if design.period_of(o.timestamp) == "intervention" else 0),
                              o.classified_fraction) for o in base]
    a = compare(window_average(base, design), design)
    b = compare(window_average(shifted, design), design)
    for ra, rb in zip(a.rows, b.rows):
        assert rb.intervention_mean == pytest.approx(ra.intervention_mean + 1, abs=1e-12)
        assert rb.intervention_sd == pytest.approx(ra.intervention_sd, abs=1e-12)
        assert (rb.baseline_mean, rb.baseline_sd, rb.baseline_n) == (ra.baseline_mean, ra.baseline_sd, ra.baseline_n)


def test_reordering_invariance():
    design = _design()
    obs = _series(design, _shifted(design, 1))
    a = compare(window_average(obs, design), design)
    b = compare(window_average(list(reversed(obs)), design), design)
    assert [(r.baseline_mean, r.intervention_mean, r.p_value) for r in a.rows] == \
           [(r.baseline_mean, r.intervention_mean, r.p_value) for r in b.rows]


def test_insufficient_data_not_computable():
    design = _design()
    t = datetime(2020, 1, 7, tzinfo=NY)
    obs = [_obs(t, 3), _obs(t + timedelta(days=14), 4)]
    report = compare(window_average(obs, design), design)
    row = report.row(("A", "main"), "weekday")
    assert not row.computable
    assert row.baseline_mean == 3.0 and row.baseline_sd is None


def test_raw_cadence_uses_observations():
    design = _design()
    obs = _series(design, _shifted(design, 1))
    report = compare_observations(obs, design)
    assert report.unit == "observation"
    assert report.row(("A", "main"), "weekday").baseline_n == 10 * 8


def test_gray_heavy_flag():
    design = _design()
    report = compare(window_average(_series(design, lambda t: 5), design), design)
    assert all(r.gray_heavy for r in report.rows)


# -- files --------------------------------------------------------------------

def test_observation_csv_roundtrip(tmp_path):
    t = datetime(2020, 1, 7, 5, tzinfo=UTC)
    obs = [CccObservation(t, "A", "main", 3, 0.5), CccObservation(t, "B", "main", None, 0.0)]
    path = write_observations_csv(obs, tmp_path / "o.csv")
    assert path.read_text().splitlines()[0] == "timestamp_iso,site_id,segment_id,ccc,classified_fraction"
    back = read_observations_csv(path)
    assert [(o.timestamp, o.key, o.ccc) for o in back] == [(o.timestamp, o.key, o.ccc) for o in obs]


def test_empty_report_csv_has_header(tmp_path):
    report = compare(WindowedSeries(), _design())
    path = write_report_csv(report, tmp_path / "r.csv")
    assert path.read_text().strip() == ",".join(REPORT_FIELDS)


def test_report_csv_shape(tmp_path):
    design = _design()
    obs = []
    for key in [("A", "main"), ("B", "main"), ("C", "southbound"), ("C", "northbound")]:
        obs += _series(design, _shifted(design, 1), key)
    report = compare(window_average(obs, design), design)
    rows = read_report_csv(write_report_csv(report, tmp_path / "r.csv"))
    assert len(rows) == 8
    assert list(rows[0]) == REPORT_FIELDS
    assert {r["stratum"] for r in rows} == {"weekday", "weekend"}
    for r in rows:
        assert 0 <= float(r["p_value"]) <= 1 and float(r["baseline_sd"]) >= 0


def test_series_csv(tmp_path):
    design = _design()
    series = window_average(_series(design, lambda t: 4), design)
    with open(write_series_csv(series, tmp_path / "s.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 56 and rows[0]["mean_ccc"] == "4.000000"


def test_plot_dimensions(tmp_path):
    design = _design()
    obs = _series(design, _shifted(design, 1)) + _series(design, lambda t: 2, ("B", "main"))
    path = plot_series(window_average(obs, design), tmp_path / "p.png", design=design,
                       width_px=640, height_px=480)
    with Image.open(path) as img:
        assert img.size == (640, 480)
