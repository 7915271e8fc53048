"""Infrastructure sensors: tag-based UWB positioning and camera-style
detection, both reporting in their own mounting frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np

from .scene import Pose, SceneModel, los_clear, vec3

DEFAULT_FOV = math.radians(90.0)


class SensorKind(str, Enum):
    UWB = "UWB"
    VISION = "VISION"


class Health(str, Enum):
    OK = "OK"
    DEGRADED = "DEGRADED"
    DOWN = "DOWN"


class SensorDown(RuntimeError):
    """A DOWN sensor was asked for a measurement."""


@dataclass(frozen=True)
class SensorMeta:
    sensor_id: str
    kind: SensorKind
    mounting_pose: Pose = Pose()


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.10
    detection_probability: float = 0.98

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not 0.0 <= self.detection_probability <= 1.0:
            raise ValueError("detection_probability must lie in [0, 1]")


@dataclass(frozen=True)
class PositionMeasurement:
    entity_id: str
    position: np.ndarray
    covariance: np.ndarray


@dataclass(frozen=True)
class Detection:
    entity_id: Optional[str]  # None: identity unknown to the camera
    center: np.ndarray
    extents: np.ndarray
    covariance: np.ndarray


@dataclass(frozen=True)
class DetectionSet:
    detections: tuple[Detection, ...]


@dataclass(frozen=True)
class SensState:
    meta: SensorMeta
    timestamp: float
    payload: Union[PositionMeasurement, DetectionSet, None]
    health: Health = Health.OK

    def __post_init__(self):
        if self.health is Health.DOWN and self.payload is not None:
            raise ValueError("DOWN sensors carry no payload")

    def payload_dict(self) -> dict:
        d = {"sensor": self.meta.sensor_id, "kind": self.meta.kind, "health": self.health}
        p = self.payload
        if isinstance(p, PositionMeasurement):
            d["entity"] = p.entity_id
            d["pos"] = p.position
            d["cov"] = p.covariance
        elif isinstance(p, DetectionSet):
            d["detections"] = [
                {"entity": x.entity_id, "center": x.center, "extents": x.extents}
                for x in p.detections
            ]
        return d


@dataclass(frozen=True)
class WorldObservation:
    """A measurement expressed in the common (world) frame."""

    sensor_id: str
    kind: SensorKind
    timestamp: float
    entity_id: Optional[str]
    position: np.ndarray
    covariance: np.ndarray
    extents: Optional[np.ndarray] = None


def uwb_measure(true_position, meta: SensorMeta, noise: NoiseModel, rng: np.random.Generator,
                entity_id: str = "", timestamp: float = 0.0, health: Health = Health.OK) -> SensState:
    if meta.kind is not SensorKind.UWB:
        raise ValueError(f"{meta.sensor_id} is not a UWB sensor")
    if health is Health.DOWN:
        raise SensorDown(meta.sensor_id)
    sigma = noise.sigma * (2.0 if health is Health.DEGRADED else 1.0)
    local = meta.mounting_pose.to_local(vec3(true_position))
    measured = local + rng.normal(0.0, 1.0, 3) * sigma
    cov = np.eye(3) * sigma**2
    return SensState(meta, timestamp, PositionMeasurement(entity_id, measured, cov), health)


def vision_detect(scene: SceneModel, entities: Sequence[tuple[str, np.ndarray, np.ndarray]],
                  meta: SensorMeta, noise: NoiseModel, rng: np.random.Generator,
                  timestamp: float = 0.0, health: Health = Health.OK,
                  fov: float = DEFAULT_FOV, report_ids: bool = False) -> SensState:
    """Report every entity inside the azimuth cone, unoccluded, that passes the detection draw.

    The Bernoulli draw and the center noise are sampled for every entity so
    that the random stream does not depend on visibility.
    """
    if meta.kind is not SensorKind.VISION:
        raise ValueError(f"{meta.sensor_id} is not a vision sensor")
    if health is Health.DOWN:
        raise SensorDown(meta.sensor_id)
    pose = meta.mounting_pose
    sigma = noise.sigma * (2.0 if health is Health.DEGRADED else 1.0)
    rot_abs = np.abs(pose.rotation.T)
    found = []
    for ent_id, position, extents in entities:
        position = vec3(position)
        u = rng.random()
        jitter = rng.normal(0.0, 1.0, 3) * sigma
        local = pose.to_local(position)
        if math.hypot(local[0], local[1]) == 0.0:
            continue
        if abs(math.atan2(local[1], local[0])) > fov / 2:
            continue
        if not los_clear(scene, pose.position, position):
            continue
        if u >= noise.detection_probability:
            continue
        found.append(Detection(ent_id if report_ids else None, local + jitter,
                               rot_abs @ vec3(extents), np.eye(3) * sigma**2))
    return SensState(meta, timestamp, DetectionSet(tuple(found)), health)


def to_common_frame(state: SensState) -> list[WorldObservation]:
    if state.payload is None:
        raise ValueError(f"{state.meta.sensor_id}: no payload to transform")
    pose = state.meta.mounting_pose
    r = pose.rotation
    meta = state.meta
    p = state.payload
    if isinstance(p, PositionMeasurement):
        return [WorldObservation(meta.sensor_id, meta.kind, state.timestamp, p.entity_id,
                                 pose.to_world(p.position), r @ p.covariance @ r.T)]
    rot_abs = np.abs(r)
    return [
        WorldObservation(meta.sensor_id, meta.kind, state.timestamp, d.entity_id,
                         pose.to_world(d.center), r @ d.covariance @ r.T, rot_abs @ d.extents)
        for d in p.detections
    ]


def inverse_transform(pose: Pose, world_point) -> np.ndarray:
    """World point into the sensor frame (inverse of the mounting transform)."""
    return pose.to_local(world_point)
