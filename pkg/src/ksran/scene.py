"""Warehouse geometry: poses, boxes, the geofence, AGV routes and the
geometric predicates (occlusion, mirroring, containment) used everywhere else.

Positions are plain ``numpy`` arrays of shape ``(3,)`` in meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

# Endpoints of an occlusion test are pulled inward by this much so that a
# segment starting on a box face does not occlude itself.
ENDPOINT_OFFSET = 1e-6
DEFAULT_CARRIER = 140e9


class InvalidInputError(ValueError):
    """Raised when an operation receives geometrically meaningless input."""


def vec3(x, y=None, z=None) -> np.ndarray:
    """Build a finite 3-vector from three scalars or one 3-sequence."""
    if y is None and z is None:
        v = np.asarray(x, dtype=float).reshape(-1)
    else:
        v = np.array([x, y, z], dtype=float)
    if v.shape != (3,):
        raise InvalidInputError(f"expected 3 components, got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"non-finite vector {v}")
    return v


def wrap_angle(a: float) -> float:
    """Wrap an angle to [-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    return w


@dataclass(frozen=True)
class Pose:
    """Rigid mounting pose; rotation is yaw (z), then pitch (y), then roll (x)."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", vec3(self.position))
        for name in ("yaw", "pitch", "roll"):
            v = float(getattr(self, name))
            if not (-math.pi <= v <= math.pi):
                raise InvalidInputError(f"{name}={v} outside [-pi, pi]")
            object.__setattr__(self, name, v)

    @cached_property
    def rotation(self) -> np.ndarray:
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        cr, sr = math.cos(self.roll), math.sin(self.roll)
        rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
        ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
        rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
        return rz @ ry @ rx

    def to_world(self, p) -> np.ndarray:
        return self.rotation @ np.asarray(p, dtype=float) + self.position

    def to_local(self, p) -> np.ndarray:
        return self.rotation.T @ (np.asarray(p, dtype=float) - self.position)

    def local_azimuth(self, direction) -> float:
        """Azimuth of a world-frame direction vector, seen from this pose."""
        d = self.rotation.T @ np.asarray(direction, dtype=float)
        return math.atan2(d[1], d[0])


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray
    reflectivity: float = 0.3
    label: str = ""

    def __post_init__(self):
        lo, hi = vec3(self.min), vec3(self.max)
        if np.any(lo > hi):
            raise InvalidInputError(f"box {self.label!r}: min {lo} exceeds max {hi}")
        if not 0.0 <= self.reflectivity <= 1.0:
            raise InvalidInputError(f"box {self.label!r}: reflectivity {self.reflectivity} not in [0,1]")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def centered(cls, center, extents, reflectivity=0.0, label="") -> "Aabb":
        c, e = vec3(center), vec3(extents)
        return cls(c - e / 2.0, c + e / 2.0, reflectivity, label)

    def translated(self, offset) -> "Aabb":
        o = vec3(offset)
        return Aabb(self.min + o, self.max + o, self.reflectivity, self.label)

    @property
    def center(self) -> np.ndarray:
        return (self.min + self.max) / 2.0

    def faces(self) -> list["Face"]:
        out = []
        for axis in range(3):
            out.append(Face(self, axis, -1))
            out.append(Face(self, axis, +1))
        return out


@dataclass(frozen=True)
class Face:
    """One side of an Aabb: the plane ``x[axis] == offset`` with outward normal ``side``."""

    box: Aabb
    axis: int
    side: int

    @property
    def offset(self) -> float:
        return float(self.box.max[self.axis] if self.side > 0 else self.box.min[self.axis])

    @property
    def key(self) -> str:
        return f"{self.box.label}:{'xyz'[self.axis]}{'+' if self.side > 0 else '-'}"

    def contains_in_plane(self, q: np.ndarray, tol: float = 1e-9) -> bool:
        for ax in range(3):
            if ax == self.axis:
                continue
            if q[ax] < self.box.min[ax] - tol or q[ax] > self.box.max[ax] + tol:
                return False
        return True


def _is_convex(poly: Sequence[tuple[float, float]]) -> bool:
    n = len(poly)
    sign = 0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        x2, y2 = poly[(i + 2) % n]
        cross = (x1 - x0) * (y2 - y1) - (y1 - y0) * (x2 - x1)
        if abs(cross) < 1e-12:
            continue
        s = 1 if cross > 0 else -1
        if sign == 0:
            sign = s
        elif s != sign:
            return False
    return sign != 0


@dataclass(frozen=True)
class SceneModel:
    obstacles: tuple[Aabb, ...] = ()
    geofence: tuple[tuple[float, float], ...] = ((0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0))
    carrier_frequency: float = DEFAULT_CARRIER

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        fence = tuple((float(x), float(y)) for x, y in self.geofence)
        if len(fence) < 3 or not _is_convex(fence):
            raise InvalidInputError("geofence must be a convex polygon with at least 3 vertices")
        if not self.carrier_frequency > 0:
            raise InvalidInputError("carrier_frequency must be positive")
        object.__setattr__(self, "geofence", fence)

    @cached_property
    def _box_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.obstacles:
            return np.zeros((0, 3)), np.zeros((0, 3))
        return (np.array([b.min for b in self.obstacles]),
                np.array([b.max for b in self.obstacles]))

    @cached_property
    def _fence_orientation(self) -> float:
        area = 0.0
        pts = self.geofence
        for (x0, y0), (x1, y1) in zip(pts, pts[1:] + pts[:1]):
            area += x0 * y1 - x1 * y0
        return 1.0 if area > 0 else -1.0

    def with_obstacles(self, extra: Sequence[Aabb]) -> "SceneModel":
        if not extra:
            return self
        return SceneModel(self.obstacles + tuple(extra), self.geofence, self.carrier_frequency)


@dataclass(frozen=True)
class RoutePlan:
    """Timed waypoints; positions are linearly interpolated between them."""

    waypoints: tuple[tuple[float, np.ndarray], ...]

    def __post_init__(self):
        wps = tuple((float(t), vec3(p)) for t, p in self.waypoints)
        for (t0, _), (t1, _) in zip(wps, wps[1:]):
            if not t1 > t0:
                raise InvalidInputError("route waypoint times must be strictly increasing")
        object.__setattr__(self, "waypoints", wps)

    @classmethod
    def stationary(cls, position) -> "RoutePlan":
        return cls(((0.0, vec3(position)),))

    @cached_property
    def _arrays(self):
        times = np.array([t for t, _ in self.waypoints])
        pos = np.array([p for _, p in self.waypoints])
        return times, pos

    @property
    def max_speed(self) -> float:
        times, pos = self._arrays
        if len(times) < 2:
            return 0.0
        seg = np.linalg.norm(np.diff(pos, axis=0), axis=1) / np.diff(times)
        return float(seg.max())


def _slab_hits(a: np.ndarray, b: np.ndarray, mins: np.ndarray, maxs: np.ndarray) -> np.ndarray:
    """Closed segment [a, b] against N closed boxes; returns a boolean mask.

    Endpoints are put in a canonical order first so that the answer does
    not depend on the direction of the segment, even under rounding.
    """
    if tuple(b) < tuple(a):
        a, b = b, a
    d = b - a
    t0 = np.zeros(len(mins))
    t1 = np.ones(len(mins))
    hit = np.ones(len(mins), dtype=bool)
    for ax in range(3):
        lo, hi = mins[:, ax], maxs[:, ax]
        if d[ax] == 0.0:
            hit &= (a[ax] >= lo) & (a[ax] <= hi)
            continue
        ta = (lo - a[ax]) / d[ax]
        tb = (hi - a[ax]) / d[ax]
        t0 = np.maximum(t0, np.minimum(ta, tb))
        t1 = np.minimum(t1, np.maximum(ta, tb))
    return hit & (t0 <= t1)


def segment_intersects_aabb(a, b, box: Aabb) -> bool:
    """True iff the closed segment [a, b] touches the closed box."""
    a, b = vec3(a), vec3(b)
    if np.array_equal(a, b):
        raise InvalidInputError("degenerate segment: a == b")
    return bool(_slab_hits(a, b, box.min[None, :], box.max[None, :])[0])


def los_clear(scene: SceneModel, a, b) -> bool:
    a, b = vec3(a), vec3(b)
    if np.array_equal(a, b):
        raise InvalidInputError("degenerate segment: a == b")
    mins, maxs = scene._box_arrays
    if len(mins) == 0:
        return True
    d = b - a
    length = float(np.linalg.norm(d))
    if length <= 2 * ENDPOINT_OFFSET:
        return True
    u = d / length
    a2 = a + ENDPOINT_OFFSET * u
    b2 = b - ENDPOINT_OFFSET * u
    return not bool(_slab_hits(a2, b2, mins, maxs).any())


def mirror_across_face(p, axis: int, offset: float) -> np.ndarray:
    """Reflect ``p`` across the plane ``x[axis] == offset``."""
    q = vec3(p).copy()
    q[axis] = 2.0 * offset - q[axis]
    return q


def geofence_contains(scene: SceneModel, p, tol: float = 1e-9) -> bool:
    x, y = float(p[0]), float(p[1])
    pts = scene.geofence
    orient = scene._fence_orientation
    for (x0, y0), (x1, y1) in zip(pts, pts[1:] + pts[:1]):
        cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
        if cross * orient < -tol:
            return False
    return True


def route_position_at(route: RoutePlan, t: float) -> np.ndarray:
    if not route.waypoints:
        raise InvalidInputError("empty route")
    times, pos = route._arrays
    if t <= times[0]:
        return pos[0].copy()
    if t >= times[-1]:
        return pos[-1].copy()
    i = int(np.searchsorted(times, t, side="right")) - 1
    w = (t - times[i]) / (times[i + 1] - times[i])
    return pos[i] + w * (pos[i + 1] - pos[i])
