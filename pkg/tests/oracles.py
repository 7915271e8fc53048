"""Independent reference implementations used to check the package.

These deliberately avoid the slab method and the package's image tracer.
"""

from __future__ import annotations

import math

import numpy as np

TRIM = 1e-6


def point_box_distance(p, lo, hi) -> float:
    d = np.maximum(np.maximum(lo - p, 0.0), p - hi)
    return float(np.linalg.norm(d))


def segment_box_distance(a, b, lo, hi, iters: int = 200) -> float:
    """Minimum distance from segment [a, b] to a closed box.

    The distance along the segment is convex in the segment parameter, so a
    ternary search finds its minimum.
    """
    a, b, lo, hi = (np.asarray(v, float) for v in (a, b, lo, hi))
    l, r = 0.0, 1.0
    for _ in range(iters):
        m1 = l + (r - l) / 3
        m2 = r - (r - l) / 3
        if point_box_distance(a + m1 * (b - a), lo, hi) <= point_box_distance(a + m2 * (b - a), lo, hi):
            r = m2
        else:
            l = m1
    s = 0.5 * (l + r)
    return min(point_box_distance(a + s * (b - a), lo, hi),
               point_box_distance(a, lo, hi), point_box_distance(b, lo, hi))


def sampled_hit(a, b, lo, hi, n: int = 10_000) -> bool:
    a, b = np.asarray(a, float), np.asarray(b, float)
    s = np.linspace(0.0, 1.0, n)[:, None]
    pts = a + s * (b - a)
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    return bool(inside.any())


def _blocked(a, b, boxes) -> bool:
    a, b = np.asarray(a, float), np.asarray(b, float)
    d = b - a
    n = float(np.linalg.norm(d))
    if n <= 2 * TRIM:
        return False
    a2, b2 = a + d / n * TRIM, b - d / n * TRIM
    return any(segment_box_distance(a2, b2, lo, hi) <= 1e-12 for lo, hi, _ in boxes)


def enumerate_paths(boxes, tx, rx) -> list[float]:
    """Path lengths of the direct path and every valid single specular bounce.

    ``boxes`` is a list of ``(lo, hi, reflectivity)``. Every one of the six
    faces of every box is tried; the bounce point comes from similar
    triangles rather than from mirroring.
    """
    tx, rx = np.asarray(tx, float), np.asarray(rx, float)
    lengths = []
    if not _blocked(tx, rx, boxes):
        lengths.append(float(np.linalg.norm(rx - tx)))
    for lo, hi, gamma in boxes:
        if gamma <= 0:
            continue
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        for axis in range(3):
            for plane, outward in ((lo[axis], -1.0), (hi[axis], 1.0)):
                h1 = (tx[axis] - plane) * outward
                h2 = (rx[axis] - plane) * outward
                if h1 <= 0 or h2 <= 0:
                    continue
                frac = h1 / (h1 + h2)
                q = tx + frac * (rx - tx)
                q[axis] = plane
                others = [k for k in range(3) if k != axis]
                if any(q[k] < lo[k] or q[k] > hi[k] for k in others):
                    continue
                if _blocked(tx, q, boxes) or _blocked(q, rx, boxes):
                    continue
                lengths.append(float(np.linalg.norm(q - tx) + np.linalg.norm(rx - q)))
    return sorted(lengths)


def array_factor_db(n: int, spacing: float, steer: float, angle: float) -> float:
    """ULA array-factor magnitude in dB (peak 20 log10 n), summed in extended precision."""
    import mpmath

    mpmath.mp.dps = 40
    psi = 2 * mpmath.pi * spacing * (mpmath.sin(angle) - mpmath.sin(steer))
    s = sum(mpmath.exp(1j * k * psi) for k in range(n))
    mag = abs(s)
    if mag == 0:
        return -math.inf
    return float(20 * mpmath.log10(mag))


def free_space_amplitude(length: float, freq: float) -> float:
    return 299_792_458.0 / freq / (4 * math.pi * length)
