"""Time the numba and numpy backends of the hot kernels.

    python3 benchmarks/bench_kernels.py [--size 3000] [--repeat 5] [--json out.json]

The numba variants are warmed up once before timing, so compilation (or the
cache load) is excluded. Both backends are checked to agree before timing.
"""
from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time

import numpy as np

from congestion_harvester import kernels
from congestion_harvester._accel import HAS_NUMBA
from congestion_harvester.congestion import default_palette

logger = logging.getLogger("bench_kernels")


def _cases(size: int, rng: np.random.Generator):
    palette = default_palette()
    refs = np.asarray([c.rgb for c in palette.colors], dtype=np.int32)
    pixels = refs[rng.integers(0, len(refs), (size, size))].astype(np.uint8)
    noise = rng.integers(-25, 26, pixels.shape)
    pixels = np.clip(pixels.astype(np.int32) + noise, 0, 255).astype(np.uint8)
    tau = palette.tau

    angles = np.sort(rng.uniform(0, 2 * np.pi, 64))
    radius = size * rng.uniform(0.2, 0.45, 64)
    ys = size / 2 + radius * np.sin(angles)
    xs = size / 2 + radius * np.cos(angles)

    t = np.linspace(0, 1, 200)
    sy = size * (0.1 + 0.8 * t)
    sx = size * (0.5 + 0.35 * np.sin(6 * t))

    return {
        "classify": (kernels.classify_pixels_numba, kernels.classify_pixels_numpy, (pixels, refs, tau)),
        "polygon": (kernels.polygon_mask_numba, kernels.polygon_mask_numpy, (ys, xs, (size, size))),
        "stroke": (kernels.stroke_coverage_numba, kernels.stroke_coverage_numpy,
                   (sy, sx, 3.0, (size, size))),
        "stroke_aa": (lambda *a: kernels.stroke_coverage_numba(*a, samples=4),
                      lambda *a: kernels.stroke_coverage_numpy(*a, samples=4), (sy, sx, 3.0, (size, size))),
    }


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return bool(np.array_equal(a, b))


def _time(fn, args, repeat: int) -> float:
    runs = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        runs.append(time.perf_counter() - t0)
    return statistics.median(runs)


def run(size: int = 3000, repeat: int = 5, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (fast, slow, args) in _cases(size, rng).items():
        expected = slow(*args)
        row = {"kernel": name, "size": size, "numpy_s": _time(slow, args, repeat)}
        if HAS_NUMBA:
            got = fast(*args)  # warm-up / compile
            if not _same(got, expected):
                raise AssertionError(f"{name}: backends disagree")
            row["numba_s"] = _time(fast, args, repeat)
            row["speedup"] = row["numpy_s"] / row["numba_s"] if row["numba_s"] > 0 else float("inf")
        results.append(row)
    return results


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=3000, help="image side in pixels")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="also write results to this file")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    if not HAS_NUMBA:
        logger.warning("numba is not installed; timing the numpy backend only")
    results = run(args.size, args.repeat, args.seed)
    print(f"{'kernel':<10} {'size':>6} {'numpy [s]':>10} {'numba [s]':>10} {'speedup':>8}")
    for r in results:
        nb = f"{r['numba_s']:.4f}" if "numba_s" in r else "n/a"
        sp = f"{r['speedup']:.1f}x" if "speedup" in r else "n/a"
        print(f"{r['kernel']:<10} {r['size']:>6} {r['numpy_s']:>10.4f} {nb:>10} {sp:>8}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
