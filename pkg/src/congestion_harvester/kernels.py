"""Pixel-level hot loops, each with a numba and a pure-numpy implementation.

Both implementations evaluate the same floating point expressions in the same
order, so their outputs are identical, not merely close. The active backend is
picked at import time from ``CONGESTION_HARVESTER_NUMBA`` and can be switched
with :func:`set_backend`.
"""
from __future__ import annotations

import math

import numpy as np

from . import _accel

_CHUNK = 1 << 20

_backend = "numba" if _accel.USE_NUMBA else "numpy"


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not _accel.HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    previous = _backend
    _backend = name
    return previous


# ---------------------------------------------------------------------------
# nearest-palette classification


def _classify_loop(pixels, refs, tau2, out):
    n = pixels.shape[0]
    k = refs.shape[0]
    for p in range(n):
        best = -1
        best_d = 1 << 30
        for c in range(k):
            d = 0
            for ch in range(3):
                diff = np.int32(pixels[p, ch]) - refs[c, ch]
                d += diff * diff
            if d < best_d:
                best_d = d
                best = c
        if best_d <= tau2:
            out[p] = best
        else:
            out[p] = -1


_classify_jit = _accel.njit(_classify_loop)


def classify_pixels_numba(pixels: np.ndarray, refs: np.ndarray, tau: float) -> np.ndarray:
    pixels, refs = _prep_classify(pixels, refs)
    out = np.empty(pixels.shape[0], dtype=np.int8)
    _classify_jit(pixels, refs, float(tau) * float(tau), out)
    return out


def classify_pixels_numpy(pixels: np.ndarray, refs: np.ndarray, tau: float) -> np.ndarray:
    pixels, refs = _prep_classify(pixels, refs)
    tau2 = float(tau) * float(tau)
    out = np.empty(pixels.shape[0], dtype=np.int8)
    for start in range(0, pixels.shape[0], _CHUNK):
        block = pixels[start:start + _CHUNK].astype(np.int32)
        d2 = ((block[:, None, :] - refs[None, :, :]) ** 2).sum(axis=2)
        # argmin keeps the first minimum, i.e. the lower palette index on ties
        best = d2.argmin(axis=1)
        best_d = d2[np.arange(block.shape[0]), best]
        out[start:start + _CHUNK] = np.where(best_d <= tau2, best, -1)
    return out


def _prep_classify(pixels, refs):
    pixels = np.ascontiguousarray(np.asarray(pixels, dtype=np.uint8).reshape(-1, 3))
    refs = np.ascontiguousarray(np.asarray(refs, dtype=np.int32).reshape(-1, 3))
    return pixels, refs


def classify_pixels(pixels: np.ndarray, refs: np.ndarray, tau: float) -> np.ndarray:
    """Index of the nearest reference color per pixel, or -1 beyond ``tau``.

    ``pixels`` is any array whose last axis is RGB; the result is flat.
    Distances are squared Euclidean in integer RGB, so ties are exact and go
    to the lower index.
    """
    if _backend == "numba":
        return classify_pixels_numba(pixels, refs, tau)
    return classify_pixels_numpy(pixels, refs, tau)


# ---------------------------------------------------------------------------
# polygon fill on pixel centers (even-odd rule)


def _polygon_fill_loop(ys, xs, r0, c0, mask):
    nv = ys.shape[0]
    height, width = mask.shape
    nodes = np.empty(nv, dtype=np.float64)
    for r in range(height):
        yc = (r0 + r) + 0.5
        m = 0
        j = nv - 1
        for i in range(nv):
            if (ys[i] > yc) != (ys[j] > yc):
                nodes[m] = xs[i] + (yc - ys[i]) * (xs[j] - xs[i]) / (ys[j] - ys[i])
                m += 1
            j = i
        if m < 2:
            continue
        # insertion sort, m is tiny
        for a in range(1, m):
            v = nodes[a]
            b = a - 1
            while b >= 0 and nodes[b] > v:
                nodes[b + 1] = nodes[b]
                b -= 1
            nodes[b + 1] = v
        for p in range(0, m - 1, 2):
            lo = nodes[p]
            hi = nodes[p + 1]
            # columns whose center cx satisfies lo <= cx < hi
            c_lo = int(math.ceil(lo - 0.5)) - c0
            while c_lo + c0 + 0.5 < lo:
                c_lo += 1
            while c_lo - 1 + c0 + 0.5 >= lo:
                c_lo -= 1
            c_hi = int(math.ceil(hi - 0.5)) - c0
            while c_hi + c0 + 0.5 < hi:
                c_hi += 1
            while c_hi - 1 + c0 + 0.5 >= hi:
                c_hi -= 1
            if c_lo < 0:
                c_lo = 0
            if c_hi > width:
                c_hi = width
            for c in range(c_lo, c_hi):
                mask[r, c] = True


_polygon_fill_jit = _accel.njit(_polygon_fill_loop)


def _window(ys, xs, shape):
    r0 = max(int(math.floor(ys.min())) - 1, 0)
    r1 = min(int(math.ceil(ys.max())) + 1, shape[0])
    c0 = max(int(math.floor(xs.min())) - 1, 0)
    c1 = min(int(math.ceil(xs.max())) + 1, shape[1])
    return r0, max(r1, r0), c0, max(c1, c0)


def polygon_mask_numba(ys, xs, shape):
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    r0, r1, c0, c1 = _window(ys, xs, shape)
    sub = np.zeros((r1 - r0, c1 - c0), dtype=np.bool_)
    if sub.size:
        _polygon_fill_jit(ys, xs, r0, c0, sub)
    return sub, r0, c0


def polygon_mask_numpy(ys, xs, shape):
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    r0, r1, c0, c1 = _window(ys, xs, shape)
    yc = (np.arange(r0, r1) + 0.5)[:, None]
    xc = (np.arange(c0, c1) + 0.5)[None, :]
    inside = np.zeros((r1 - r0, c1 - c0), dtype=np.bool_)
    j = len(ys) - 1
    for i in range(len(ys)):
        straddles = (ys[i] > yc) != (ys[j] > yc)
        if ys[j] != ys[i]:
            cross = xs[i] + (yc - ys[i]) * (xs[j] - xs[i]) / (ys[j] - ys[i])
            inside ^= straddles & (xc < cross)
        j = i
    return inside, r0, c0


def polygon_mask(ys, xs, shape):
    """Fill a polygon given in fractional pixel coordinates.

    ``ys``/``xs`` are vertex rows/columns where pixel ``(r, c)`` spans
    ``[r, r+1) x [c, c+1)``. A pixel is inside when its center is, by the
    even-odd rule. Returns ``(submask, r0, c0)`` with the mask cropped to the
    polygon's bounding window inside ``shape``.
    """
    if _backend == "numba":
        return polygon_mask_numba(ys, xs, shape)
    return polygon_mask_numpy(ys, xs, shape)


# ---------------------------------------------------------------------------
# thick polyline coverage


def _stroke_loop(ys, xs, half_width, samples, cover):
    height, width = cover.shape
    hw2 = half_width * half_width
    inv = 1.0 / (samples * samples)
    for s in range(ys.shape[0] - 1):
        ay = ys[s]
        ax = xs[s]
        by = ys[s + 1]
        bx = xs[s + 1]
        dy = by - ay
        dx = bx - ax
        len2 = dy * dy + dx * dx
        r_lo = max(int(math.floor(min(ay, by) - half_width)) - 1, 0)
        r_hi = min(int(math.ceil(max(ay, by) + half_width)) + 1, height)
        c_lo = max(int(math.floor(min(ax, bx) - half_width)) - 1, 0)
        c_hi = min(int(math.ceil(max(ax, bx) + half_width)) + 1, width)
        for r in range(r_lo, r_hi):
            for c in range(c_lo, c_hi):
                hits = 0
                for sy in range(samples):
                    py = r + (sy + 0.5) / samples
                    for sx in range(samples):
                        px = c + (sx + 0.5) / samples
                        if len2 > 0.0:
                            t = ((py - ay) * dy + (px - ax) * dx) / len2
                            if t < 0.0:
                                t = 0.0
                            elif t > 1.0:
                                t = 1.0
                        else:
                            t = 0.0
                        ey = py - (ay + t * dy)
                        ex = px - (ax + t * dx)
                        if ey * ey + ex * ex <= hw2:
                            hits += 1
                cov = hits * inv
                if cov > cover[r, c]:
                    cover[r, c] = cov


_stroke_jit = _accel.njit(_stroke_loop)


def stroke_coverage_numba(ys, xs, half_width, shape, samples=1):
    cover = np.zeros(shape, dtype=np.float64)
    _stroke_jit(np.ascontiguousarray(ys, dtype=np.float64),
                np.ascontiguousarray(xs, dtype=np.float64),
                float(half_width), int(samples), cover)
    return cover


def stroke_coverage_numpy(ys, xs, half_width, shape, samples=1):
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    half_width = float(half_width)
    height, width = shape
    cover = np.zeros(shape, dtype=np.float64)
    hw2 = half_width * half_width
    inv = 1.0 / (samples * samples)
    offsets = (np.arange(samples) + 0.5) / samples
    for s in range(len(ys) - 1):
        ay, ax, by, bx = ys[s], xs[s], ys[s + 1], xs[s + 1]
        dy = by - ay
        dx = bx - ax
        len2 = dy * dy + dx * dx
        r_lo = max(int(math.floor(min(ay, by) - half_width)) - 1, 0)
        r_hi = min(int(math.ceil(max(ay, by) + half_width)) + 1, height)
        c_lo = max(int(math.floor(min(ax, bx) - half_width)) - 1, 0)
        c_hi = min(int(math.ceil(max(ax, bx) + half_width)) + 1, width)
        if r_lo >= r_hi or c_lo >= c_hi:
            continue
        rows = np.arange(r_lo, r_hi, dtype=np.float64)
        cols = np.arange(c_lo, c_hi, dtype=np.float64)
        hits = np.zeros((r_hi - r_lo, c_hi - c_lo), dtype=np.int64)
        for oy in offsets:
            py = (rows + oy)[:, None]
            for ox in offsets:
                px = (cols + ox)[None, :]
                if len2 > 0.0:
                    t = np.clip(((py - ay) * dy + (px - ax) * dx) / len2, 0.0, 1.0)
                else:
                    t = np.zeros((1, 1))
                ey = py - (ay + t * dy)
                ex = px - (ax + t * dx)
                hits += (ey * ey + ex * ex) <= hw2
        block = cover[r_lo:r_hi, c_lo:c_hi]
        np.maximum(block, hits * inv, out=block)
    return cover


def stroke_coverage(ys, xs, half_width, shape, samples=1):
    """Fraction of each pixel within ``half_width`` of the polyline.

    Coverage is estimated on a ``samples x samples`` grid of sub-pixel points;
    ``samples=1`` tests the pixel center only, giving a binary mask.
    """
    if _backend == "numba":
        return stroke_coverage_numba(ys, xs, half_width, shape, samples)
    return stroke_coverage_numpy(ys, xs, half_width, shape, samples)
