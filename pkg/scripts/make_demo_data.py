"""Regenerate the shipped demo config, scenario and ROI files.

Roads are laid out in mosaic pixel coordinates and converted to lat/long with
the grid's own inverse mapping, so the files stay consistent with geo_grid.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

from congestion_harvester.geo_grid import grid_spec, mosaic_pixel_to_latlong

OUT = Path(__file__).resolve().parents[1] / "src" / "congestion_harvester" / "data" / "demo"
SPEC = grid_spec((40.81, -73.92), 15, 256, 2, 2)
ROAD_WIDTH = 6.0
ROI_HALF_WIDTH = 2.0

# (site, segment, description, pixel polyline (row, col), low, high, weekday shift)
ROADS = [
    ("A", "main", "east-west arterial crossing the tile seam", [(120, 40), (120, 470)], 3, 4, 0.2),
    ("B", "main", "diagonal avenue", [(300, 60), (480, 220)], 2, 3, 0.2),
    ("C", "southbound", "two-way road, west carriageway", [(150, 380), (480, 380)], 3, 4, 0.2),
    ("C", "northbound", "two-way road, east carriageway", [(150, 392), (480, 392)], 3, 4, 0.2),
]


def latlong(row, col):
    p = mosaic_pixel_to_latlong(SPEC, row - 0.5, col - 0.5)
    return [round(p.lat_deg, 10), round(p.long_deg, 10)]


def corridor(a, b, half):
    """Rectangle of half-width ``half`` around segment a-b, shortened by 4 px per end."""
    (r0, c0), (r1, c1) = a, b
    length = math.hypot(r1 - r0, c1 - c0)
    ur, uc = (r1 - r0) / length, (c1 - c0) / length
    nr, nc = -uc, ur
    a = (r0 + 4 * ur, c0 + 4 * uc)
    b = (r1 - 4 * ur, c1 - 4 * uc)
    corners = [(a[0] + half * nr, a[1] + half * nc), (b[0] + half * nr, b[1] + half * nc),
               (b[0] - half * nr, b[1] - half * nc), (a[0] - half * nr, a[1] - half * nc)]
    return [latlong(r, c) for r, c in corners]


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    roads, sites = [], {}
    for site, seg, desc, line, low, high, shift in ROADS:
        roads.append({
            "road_id": f"{site}-{seg}", "site_id": site, "segment_id": seg, "width_px": ROAD_WIDTH,
            "polyline": [latlong(r, c) for r, c in line],
            "schedule": {"kind": "study_shift", "low": low, "high": high,
                         "weekday_shift": shift, "weekend_shift": 0.0},
        })
        sites.setdefault(site, {"site_id": site, "segments": []})["segments"].append(
            {"segment_id": seg, "description": desc, "polygon": corridor(line[0], line[1], ROI_HALF_WIDTH)})
    scenario = {"version": 1, "seed": 2020, "background": [250, 248, 240], "background_noise": 0,
                "ref_lat": SPEC.center.lat_deg, "antialias": False,
                "timezone": "America/New_York", "cadence_h": 3, "roads": roads}
    config = {
        "version": 1,
        "grid": {"center": [SPEC.center.lat_deg, SPEC.center.long_deg], "zoom": SPEC.zoom,
                 "n_pix": SPEC.n_pix, "n_lat": SPEC.n_lat, "n_long": SPEC.n_long, "excluded": []},
        "provider": {"kind": "synthetic", "max_retries": 1, "backoff_base_s": 0.1},
        "archive": {"root": "archive", "timezone": "UTC", "safe_names": True},
        "palette": None,
        "sites": "sites.json",
        "scenario": "scenario.json",
        "schedule": {"interval_h": 3, "anchor": "2020-01-06T00:00", "timezone": "America/New_York"},
        "study": {"baseline": ["2020-01-06T00:00", "2020-01-20T00:00"],
                  "intervention": ["2020-01-20T00:00", "2020-02-03T00:00"],
                  "window_h": 12, "cadence_h": 3, "timezone": "America/New_York"},
        "output_dir": "out",
    }
    for name, doc in (("scenario.json", scenario), ("sites.json", {"version": 1, "sites": list(sites.values())}),
                      ("config.json", config)):
        (OUT / name).write_text(json.dumps(doc, indent=1) + "\n")
        print("wrote", OUT / name)


if __name__ == "__main__":
    main()
