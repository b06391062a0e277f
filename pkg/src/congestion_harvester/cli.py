"""``congestion-harvester`` command line.

Every subcommand reads the JSON config given by ``--config``. Failures print a
single ``error: <kind>: <message>`` line on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import logging
import shlex
import signal
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .acquisition import AcquisitionError, build_url, capture_grid, make_provider
from .analytics import (STRATA, DesignError, compare, compare_observations, plot_series,
                        read_observations_csv, segment_label, window_average,
                        write_observations_csv, write_report_csv, write_series_csv, zone)
from .config import Config, ConfigError, load_config
from .congestion import PaletteError, RoiError, extract_ccc, rasterize_rois
from .geo_grid import GeometryError, angular_spans, plan_grid
from .mosaic import MosaicError, export_png, grid_overlay, stitch_capture
from .scheduler import SimulatedClock, SystemClock, crontab_line, run_schedule
from .synthmap import (ScenarioError, capture_ticks, generate_study, ground_truth, load_scenario,
                       make_server, materialize)
from .tile_archive import ArchiveError, ArchiveHandle, TileFileName, scan

logger = logging.getLogger("congestion_harvester")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

_ERROR_KINDS = [
    (ConfigError, "config", EXIT_CONFIG),
    (DesignError, "config", EXIT_CONFIG),
    (PaletteError, "config", EXIT_CONFIG),
    (ArchiveError, "archive", EXIT_FAILURE),
    (MosaicError, "mosaic", EXIT_FAILURE),
    (RoiError, "roi", EXIT_FAILURE),
    (ScenarioError, "scenario", EXIT_FAILURE),
    (AcquisitionError, "acquisition", EXIT_FAILURE),
    (GeometryError, "geometry", EXIT_FAILURE),
    (OSError, "io", EXIT_FAILURE),
    (ValueError, "value", EXIT_FAILURE),
]


class CommandError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_FAILURE):
        super().__init__(message)
        self.kind = kind
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def _require(cfg: Config, attr: str, command: str):
    value = getattr(cfg, attr)
    if not value:
        raise ConfigError(f"{attr}: required by the '{command}' command")
    return value


def _out(cfg: Config, given, default_name: str) -> Path:
    if given:
        return Path(given)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg.output_dir / default_name


def _archive(cfg: Config, create: bool = False) -> ArchiveHandle:
    root = cfg.archive.root
    if create:
        root.mkdir(parents=True, exist_ok=True)
        handle = scan(root, cfg.archive.timezone, cfg.archive.safe_names)
        return handle
    return scan(root, cfg.archive.timezone, cfg.archive.safe_names)


def _schedule_anchor(cfg: Config) -> datetime | None:
    if cfg.schedule is not None:
        return cfg.schedule.anchor
    if cfg.study is not None:
        return cfg.study.baseline[0]
    return None


def _scenario(cfg: Config, path=None):
    """Scenario ready for rendering: study schedules materialized, frame fixed."""
    path = path or cfg.scenario_path
    if path is None:
        raise ConfigError("scenario: required by the synthetic provider")
    scenario = load_scenario(path, cfg.palette)
    if scenario.ref_lat is None:
        scenario = replace(scenario, ref_lat=cfg.grid.center.lat_deg)
    if any(r.schedule.kind == "study_shift" for r in scenario.roads):
        design = _require(cfg, "study", "synth")
        scenario = materialize(scenario, design, _schedule_anchor(cfg))
    return scenario


def _provider(cfg: Config):
    scenario = _scenario(cfg) if cfg.provider.kind == "synthetic" else None
    return make_provider(cfg.provider, scenario)


def parse_timestamp(text: str, tz) -> datetime:
    """ISO timestamp or an archive stamp such as ``06_01_20_09:00``.

    Naive values are read in ``tz``.
    """
    try:
        ts = datetime.fromisoformat(text)
    except ValueError:
        try:
            ts = TileFileName.parse(f"TrafficMap_1_1_{text}.png").timestamp
        except ValueError:
            raise CommandError("value", f"cannot parse timestamp {text!r}") from None
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=zone(tz))
    return ts


def _log_report(report):
    logger.info("capture time=%s scheduled=%s ok=%d failed=%d retries=%d skipped=%d duration=%.2fs",
                report.timestamp.isoformat(),
                report.scheduled_for.isoformat() if report.scheduled_for else "-",
                len(report.succeeded), len(report.failed), sum(report.retries.values()),
                len(report.skipped_ticks), report.duration_s)
    for i, j, err in report.failed:
        logger.warning("capture time=%s tile=%d,%d error=%s", report.timestamp.isoformat(), i, j, err)


# ---------------------------------------------------------------------------
# subcommands


def cmd_plan(args, cfg: Config) -> int:
    spec = cfg.grid
    spans = angular_spans(spec)
    tiles = plan_grid(spec)
    # keep the key placeholder so the listing is shareable
    env = {cfg.provider.api_key_env: "{api_key}"}
    rows = [(t.i, t.j, f"{t.center.lat_deg:.10f}", f"{t.center.long_deg:.10f}",
             build_url(t, cfg.provider, env)) for t in tiles]
    out = sys.stdout
    if args.format == "csv":
        w = csv.writer(out)
        w.writerow(["i", "j", "lat", "long", "side_km", "url"])
        for r in rows:
            w.writerow([*r[:4], f"{spans.side_m / 1000:.4f}", r[4]])
        return EXIT_OK
    print(f"# grid {spec.n_lat}x{spec.n_long} at ({spec.center.lat_deg}, {spec.center.long_deg}), "
          f"zoom {spec.zoom}, n_pix {spec.n_pix}", file=out)
    print(f"# tile side {spans.side_m / 1000:.4f} km, d_lat {spans.d_lat_deg:.10f} deg, "
          f"d_long {spans.d_long_deg:.10f} deg", file=out)
    print(f"# {len(tiles)} tiles planned, {len(spec.excluded)} excluded", file=out)
    print(f"{'i':>3} {'j':>3} {'lat':>16} {'long':>16}  url", file=out)
    for i, j, lat, lon, url in rows:
        print(f"{i:>3} {j:>3} {lat:>16} {lon:>16}  {url}", file=out)
    return EXIT_OK


def cmd_capture(args, cfg: Config) -> int:
    archive = _archive(cfg, create=True)
    now = parse_timestamp(args.at, cfg.archive.timezone) if args.at else datetime.now(timezone.utc)
    report = capture_grid(cfg.grid, cfg.provider, archive, now, _provider(cfg))
    _log_report(report)
    print(f"captured {len(report.succeeded)} of {len(report.succeeded) + len(report.failed)} tiles "
          f"at {report.timestamp.isoformat()}")
    if report.failed:
        raise CommandError("capture", f"{len(report.failed)} tile(s) failed")
    return EXIT_OK


def cmd_daemon(args, cfg: Config) -> int:
    sched = _require(cfg, "schedule", "daemon")
    if args.print_crontab:
        command = f"congestion-harvester --config {shlex.quote(str(Path(args.config).resolve()))} capture"
        local_anchor = sched.anchor.astimezone(zone(sched.timezone))
        print(crontab_line(sched.interval, local_anchor, command))
        return EXIT_OK
    until = parse_timestamp(args.until, sched.timezone) if args.until else None
    if args.simulated_clock:
        clock = SimulatedClock(parse_timestamp(args.simulated_clock, sched.timezone))
        if until is None:
            raise CommandError("value", "--simulated-clock needs --until", EXIT_CONFIG)
    else:
        clock = SystemClock()
    previous = {}
    for sig in (signal.SIGINT, signal.SIGTERM):
        previous[sig] = signal.signal(sig, lambda *_: clock.stop.set())
    archive = _archive(cfg, create=True)
    provider = _provider(cfg)
    n = failed = 0
    try:
        for report in run_schedule(cfg.grid, cfg.provider, archive, sched.interval, sched.anchor,
                                   until, clock=clock, provider=provider):
            _log_report(report)
            n += 1
            failed += bool(report.failed)
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)
    print(f"daemon finished: {n} capture(s), {failed} with failures")
    return EXIT_OK


def cmd_stitch(args, cfg: Config) -> int:
    archive = _archive(cfg)
    ts = parse_timestamp(args.timestamp, cfg.archive.timezone)
    mosaic = stitch_capture(archive, ts, cfg.grid)
    stamp = archive.clock(ts).strftime("%m_%d_%y_%H-%M")
    path = _out(cfg, args.out, f"TrafficMapArray_{stamp}.png")
    export_png(grid_overlay(mosaic) if args.grid_lines else mosaic, path)
    print(f"wrote {path} ({mosaic.shape[0]}x{mosaic.shape[1]}, {len(mosaic.missing)} missing tile(s))")
    return EXIT_OK


def cmd_extract(args, cfg: Config) -> int:
    rois = _require(cfg, "sites", "extract")
    archive = _archive(cfg)
    tz = cfg.archive.timezone
    start = parse_timestamp(args.start, tz) if args.start else None
    end = parse_timestamp(args.end, tz) if args.end else None
    masks = rasterize_rois(rois, cfg.grid)
    observations = []
    for naive in archive.timestamps():
        ts = archive.aware(naive)
        if (start and ts < start) or (end and ts >= end):
            continue
        mosaic = stitch_capture(archive, ts, cfg.grid)
        observations.extend(extract_ccc(mosaic, rois, cfg.palette, timestamp=ts, masks=masks))
    if not observations:
        raise CommandError("extract", "no captures found in the requested range")
    path = write_observations_csv(observations, _out(cfg, args.out, "observations.csv"))
    n_missing = sum(o.ccc is None for o in observations)
    print(f"wrote {len(observations)} observations ({n_missing} missing) to {path}")
    return EXIT_OK


def _read_obs(cfg: Config, given):
    path = Path(given) if given else cfg.output_dir / "observations.csv"
    if not path.exists():
        raise CommandError("io", f"observation file {path} not found (run 'extract' first)")
    return read_observations_csv(path)


def cmd_analyze(args, cfg: Config) -> int:
    design = _require(cfg, "study", "analyze")
    observations = _read_obs(cfg, args.observations)
    if args.raw_cadence:
        report = compare_observations(observations, design, args.test)
    else:
        series = window_average(observations, design)
        write_series_csv(series, _out(cfg, args.series_out, "series.csv"))
        report = compare(series, design, args.test)
    path = write_report_csv(report, _out(cfg, args.out, "report.csv"))
    print(f"{'segment':<20} {'stratum':<8} {'baseline':>16} {'intervention':>16} {'p':>10}")
    for r in report.rows:
        def cell(mean, sd, n):
            if mean is None:
                return f"n={n}".rjust(16)
            return f"{mean:.2f}±{sd:.2f} ({n})" if sd is not None else f"{mean:.2f} ({n})"
        p = "n/a" if r.p_value is None else f"{r.p_value:.3g}"
        flag = "  gray-heavy" if r.gray_heavy else ""
        print(f"{segment_label(r.segment):<20} {r.stratum:<8} "
              f"{cell(r.baseline_mean, r.baseline_sd, r.baseline_n):>16} "
              f"{cell(r.intervention_mean, r.intervention_sd, r.intervention_n):>16} {p:>10}{flag}")
    for stratum in STRATA:
        print(f"mean difference ({stratum}): {report.mean_difference(stratum):+.3f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_plot(args, cfg: Config) -> int:
    design = _require(cfg, "study", "plot")
    series = window_average(_read_obs(cfg, args.observations), design)
    path = plot_series(series, _out(cfg, args.out, "series.png"), cfg.palette, design,
                       args.width, args.height)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_synth(args, cfg: Config) -> int:
    design = _require(cfg, "study", "synth")
    rois = cfg.sites or None
    scenario = _scenario(cfg, args.scenario)
    anchor = _schedule_anchor(cfg)
    truth_path = _out(cfg, args.truth, "ground_truth.csv")
    if args.populate:
        cfg.archive.root.mkdir(parents=True, exist_ok=True)
        result = generate_study(scenario, design, cfg.grid, cfg.archive.root, rois=rois,
                                truth_path=truth_path, archive_tz=cfg.archive.timezone,
                                safe_names=cfg.archive.safe_names, anchor=anchor)
        print(f"archived {len(result.reports)} captures under {cfg.archive.root}")
    else:
        write_observations_csv(ground_truth(scenario, capture_ticks(design, anchor), rois), truth_path)
    print(f"wrote ground truth to {truth_path}")
    return EXIT_OK


def cmd_serve(args, cfg: Config) -> int:
    server = make_server(_scenario(cfg, args.scenario), args.host, args.port)
    host, port = server.server_address[:2]
    print(f"serving synthetic tiles on http://{host}:{port}/", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="congestion-harvester",
                                description="Plan, capture, stitch and analyze traffic-map tile grids.")
    p.add_argument("--config", "-c", default="config.json", help="JSON config file (default: %(default)s)")
    p.add_argument("--verbose", "-v", action="count", default=0)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("plan", help="print the tile table (no side effects)")
    s.add_argument("--format", choices=("table", "csv"), default="table")
    s.set_defaults(func=cmd_plan, chatty=False)

    s = sub.add_parser("capture", help="capture the grid once")
    s.add_argument("--at", help="capture timestamp (default: now)")
    s.set_defaults(func=cmd_capture, chatty=True)

    s = sub.add_parser("daemon", help="capture on the configured schedule (stop with SIGINT/SIGTERM)")
    s.add_argument("--until", help="stop before this time")
    s.add_argument("--simulated-clock", metavar="START",
                   help="run on a simulated clock starting at START (requires --until)")
    s.add_argument("--print-crontab", action="store_true", help="print an equivalent crontab line and exit")
    s.set_defaults(func=cmd_daemon, chatty=True)

    s = sub.add_parser("stitch", help="stitch one capture into a PNG mosaic")
    s.add_argument("timestamp", help="ISO time or archive stamp like 06_01_20_09:00")
    s.add_argument("--out")
    s.add_argument("--grid-lines", action="store_true", help="draw tile borders (inspection only)")
    s.set_defaults(func=cmd_stitch, chatty=False)

    s = sub.add_parser("extract", help="classify ROIs for every archived capture")
    s.add_argument("--start", help="first capture time (inclusive)")
    s.add_argument("--end", help="last capture time (exclusive)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_extract, chatty=False)

    s = sub.add_parser("analyze", help="baseline vs intervention comparison report")
    s.add_argument("--observations")
    s.add_argument("--out")
    s.add_argument("--series-out")
    s.add_argument("--raw-cadence", action="store_true",
                   help="test raw observations instead of window means")
    s.add_argument("--test", choices=("welch", "mannwhitney"), default="welch")
    s.set_defaults(func=cmd_analyze, chatty=False)

    s = sub.add_parser("plot", help="plot windowed CCC series")
    s.add_argument("--observations")
    s.add_argument("--out")
    s.add_argument("--width", type=int, default=1200)
    s.add_argument("--height", type=int, default=800)
    s.set_defaults(func=cmd_plot, chatty=False)

    s = sub.add_parser("synth", help="write the synthetic scenario's ground truth")
    s.add_argument("scenario", nargs="?", help="scenario JSON (default: from config)")
    s.add_argument("--truth")
    s.add_argument("--populate", action="store_true",
                   help="also fill the archive directly on a simulated clock")
    s.set_defaults(func=cmd_synth, chatty=False)

    s = sub.add_parser("serve", help="serve synthetic tiles over HTTP")
    s.add_argument("scenario", nargs="?")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8765)
    s.set_defaults(func=cmd_serve, chatty=True)
    return p


def _setup_logging(verbose: int, chatty: bool):
    level = logging.DEBUG if verbose > 1 else logging.INFO if (verbose or chatty) else logging.WARNING
    logging.basicConfig(level=level, stream=sys.stderr, force=True,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose, args.chatty)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except CommandError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:
        for cls, kind, code in _ERROR_KINDS:
            if isinstance(exc, cls):
                logger.debug("command failed", exc_info=True)
                print(f"error: {kind}: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
