"""Deterministic ray-tracing model: line of sight plus first-order specular
reflections off box faces (image method), and route-driven blockage
prediction.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from .scene import (
    Aabb,
    InvalidInputError,
    RoutePlan,
    SceneModel,
    los_clear,
    mirror_across_face,
    route_position_at,
    vec3,
)

SPEED_OF_LIGHT = 299_792_458.0


class PathKind(str, Enum):
    LOS = "LOS"
    REFLECTED = "REFLECTED"


class Tap(NamedTuple):
    delay: float
    gain: complex
    path_id: str = ""


@dataclass(frozen=True)
class PropPath:
    kind: PathKind
    vertices: tuple[np.ndarray, ...]
    length: float
    delay: float
    gain: complex
    aod: float
    aoa: float
    reflectivities: tuple[float, ...] = ()
    path_id: str = "LOS"


@dataclass(frozen=True)
class Cir:
    paths: tuple[PropPath, ...]
    carrier_frequency: float

    @property
    def taps(self) -> tuple[Tap, ...]:
        return tuple(Tap(p.delay, p.gain, p.path_id) for p in self.paths)

    def __len__(self):
        return len(self.paths)


@dataclass(frozen=True)
class BlockageEvent:
    ue_id: str
    start: float
    end: float
    open_end: bool = False  # still blocked when the prediction horizon ran out


@dataclass
class EnvInfo:
    """Ray-traced result handed back to the knowledge agent."""

    cirs: dict[str, Cir] = field(default_factory=dict)
    blockage_events: list[BlockageEvent] = field(default_factory=list)


def path_gain(length: float, freq: float, reflectivities: Sequence[float] = ()) -> complex:
    """Free-space amplitude times bounce losses, with carrier phase rotation."""
    if not length > 0:
        raise InvalidInputError("path length must be positive")
    lam = SPEED_OF_LIGHT / freq
    amp = lam / (4.0 * math.pi * length)
    for r in reflectivities:
        amp *= r
    return amp * cmath.exp(-2j * math.pi * length / lam)


def _azimuth(frm: np.ndarray, to: np.ndarray) -> float:
    return math.atan2(to[1] - frm[1], to[0] - frm[0])


def _make_path(kind, verts, reflectivities, freq, path_id) -> PropPath:
    length = float(sum(np.linalg.norm(b - a) for a, b in zip(verts, verts[1:])))
    return PropPath(
        kind=kind,
        vertices=tuple(verts),
        length=length,
        delay=length / SPEED_OF_LIGHT,
        gain=path_gain(length, freq, reflectivities),
        aod=_azimuth(verts[0], verts[1]),
        aoa=_azimuth(verts[-1], verts[-2]),
        reflectivities=tuple(reflectivities),
        path_id=path_id,
    )


def trace_paths(scene: SceneModel, tx, rx) -> list[PropPath]:
    tx, rx = vec3(tx), vec3(rx)
    if np.array_equal(tx, rx):
        raise InvalidInputError("tx and rx coincide")
    freq = scene.carrier_frequency
    paths = []
    if los_clear(scene, tx, rx):
        paths.append(_make_path(PathKind.LOS, [tx, rx], (), freq, "LOS"))
    for box in scene.obstacles:
        if box.reflectivity <= 0.0:
            continue
        for face in box.faces():
            ax, off = face.axis, face.offset
            # both terminals must sit strictly on the outward side of the face
            if (tx[ax] - off) * face.side <= 0.0 or (rx[ax] - off) * face.side <= 0.0:
                continue
            image = mirror_across_face(tx, ax, off)
            s = (off - image[ax]) / (rx[ax] - image[ax])
            q = image + s * (rx - image)
            q[ax] = off
            if not face.contains_in_plane(q, tol=0.0):
                continue
            if np.array_equal(q, tx) or np.array_equal(q, rx):
                continue
            if not (los_clear(scene, tx, q) and los_clear(scene, q, rx)):
                continue
            paths.append(_make_path(PathKind.REFLECTED, [tx, q, rx], (box.reflectivity,), freq, face.key))
    return paths


def compose_cir(paths: Sequence[PropPath], freq: float) -> Cir:
    out = []
    for p in paths:
        g = path_gain(p.length, freq, p.reflectivities)
        out.append(PropPath(p.kind, p.vertices, p.length, p.delay, g, p.aod, p.aoa, p.reflectivities, p.path_id))
    out.sort(key=lambda p: (p.delay, p.path_id))
    return Cir(tuple(out), freq)


def predict_blockage(
    scene: SceneModel,
    tx,
    route: RoutePlan,
    blocker_routes: Sequence[tuple[RoutePlan, Aabb]],
    horizon: float,
    dt: float,
    start: float = 0.0,
    ue_id: str = "",
) -> list[BlockageEvent]:
    """Step the routes forward and report intervals where the tx-UE line is occluded.

    Each blocker's ``Aabb`` is expressed relative to its route position.
    """
    if not dt > 0:
        raise InvalidInputError("dt must be positive")
    if horizon < dt:
        raise InvalidInputError("horizon must be at least dt")
    tx = vec3(tx)
    n = int(round(horizon / dt))
    events = []
    run_start = None
    for k in range(n + 1):
        t = start + k * dt
        boxes = [ext.translated(route_position_at(r, t)) for r, ext in blocker_routes]
        ue = route_position_at(route, t)
        blocked = not los_clear(scene.with_obstacles(boxes), tx, ue)
        if blocked and run_start is None:
            run_start = t
        elif not blocked and run_start is not None:
            events.append(BlockageEvent(ue_id, run_start, t))
            run_start = None
    if run_start is not None:
        events.append(BlockageEvent(ue_id, run_start, start + (n + 1) * dt, True))
    return events
