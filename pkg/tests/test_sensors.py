import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ksran.scene import Aabb, Pose, SceneModel
from ksran.sensors import (
    Health,
    NoiseModel,
    SensorDown,
    SensorKind,
    SensorMeta,
    SensState,
    inverse_transform,
    to_common_frame,
    uwb_measure,
    vision_detect,
)

FENCE = [(-50, -50), (50, -50), (50, 50), (-50, 50)]
UWB = SensorMeta("uwb", SensorKind.UWB)
CAM = SensorMeta("cam", SensorKind.VISION, Pose((0, 0, 3)))
EXACT = NoiseModel(0.0, 1.0)
angle = st.floats(-math.pi, math.pi)
coord = st.floats(-20, 20)


def test_uwb_identity_pose_exact():
    s = uwb_measure((1.5, -2.0, 0.7), UWB, EXACT, np.random.default_rng(0), "u")
    assert np.array_equal(s.payload.position, (1.5, -2.0, 0.7))


def test_uwb_translated_mount():
    meta = SensorMeta("uwb", SensorKind.UWB, Pose((5, 0, 0)))
    s = uwb_measure((7, 1, 1), meta, EXACT, np.random.default_rng(0), "u")
    assert np.allclose(s.payload.position, (2, 1, 1))


def test_uwb_noise_statistics():
    rng = np.random.default_rng(11)
    noise = NoiseModel(0.1)
    samples = np.array([uwb_measure((0, 0, 0), UWB, noise, rng, "u").payload.position for _ in range(10_000)])
    std = samples.std(axis=0, ddof=1)
    assert np.all((0.095 <= std) & (std <= 0.105))


def test_degraded_uwb_is_noisier_and_down_raises():
    s = uwb_measure((0, 0, 0), UWB, NoiseModel(0.1), np.random.default_rng(0), "u", health=Health.DEGRADED)
    assert s.payload.covariance[0, 0] == pytest.approx(0.04)
    with pytest.raises(SensorDown):
        uwb_measure((0, 0, 0), UWB, NoiseModel(0.1), np.random.default_rng(0), "u", health=Health.DOWN)


def test_vision_occlusion():
    wall = Aabb((4, -2, 0), (5, 2, 5), 0.0, "wall")
    scene = SceneModel((wall,), FENCE)
    s = vision_detect(scene, [("agv", np.array([8.0, 0, 1]), np.ones(3))], CAM, EXACT, np.random.default_rng(0))
    assert s.payload.detections == ()


def test_vision_exact_center_when_noise_free():
    scene = SceneModel((), FENCE)
    s = vision_detect(scene, [("agv", np.array([8.0, 1, 1]), np.ones(3))], CAM, EXACT, np.random.default_rng(0))
    (d,) = s.payload.detections
    assert np.array_equal(d.center, (8, 1, -2)) and d.entity_id is None


def test_vision_ignores_entities_outside_the_cone():
    scene = SceneModel((), FENCE)
    s = vision_detect(scene, [("agv", np.array([-8.0, 0, 1]), np.ones(3))], CAM, EXACT, np.random.default_rng(0))
    assert s.payload.detections == ()


def test_vision_detection_rate():
    scene = SceneModel((), FENCE)
    rng = np.random.default_rng(3)
    noise = NoiseModel(0.05, 0.98)
    ents = [("agv", np.array([8.0, 0, 1]), np.ones(3))]
    hits = sum(len(vision_detect(scene, ents, CAM, noise, rng).payload.detections) for _ in range(10_000))
    assert 0.975 <= hits / 10_000 <= 0.985


def test_down_state_carries_no_payload():
    with pytest.raises(ValueError):
        uwb_state = uwb_measure((0, 0, 0), UWB, EXACT, np.random.default_rng(0), "u")
        SensState(UWB, 0.0, uwb_state.payload, Health.DOWN)


def test_common_frame_identity():
    s = uwb_measure((1, 2, 3), UWB, NoiseModel(0.1), np.random.default_rng(1), "u")
    (o,) = to_common_frame(s)
    assert np.array_equal(o.position, s.payload.position)
    assert np.array_equal(o.covariance, s.payload.covariance)


def test_common_frame_translation_keeps_covariance():
    meta = SensorMeta("uwb", SensorKind.UWB, Pose((3, -1, 0)))
    s = uwb_measure((1, 2, 3), meta, NoiseModel(0.1), np.random.default_rng(1), "u")
    (o,) = to_common_frame(s)
    assert np.allclose(o.position, s.payload.position + (3, -1, 0))
    assert np.allclose(o.covariance, s.payload.covariance)


def test_common_frame_yaw_quarter_turn():
    from ksran.sensors import PositionMeasurement

    meta = SensorMeta("uwb", SensorKind.UWB, Pose((2, 2, 0), math.pi / 2))
    cov = np.diag([0.01, 0.04, 0.09])
    s = SensState(meta, 0.0, PositionMeasurement("u", np.array([1.0, 0, 0]), cov))
    (o,) = to_common_frame(s)
    assert np.allclose(o.position - (2, 2, 0), (0, 1, 0), atol=1e-12)
    assert np.allclose(o.covariance, np.diag([0.04, 0.01, 0.09]), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(angle, st.floats(-math.pi / 2, math.pi / 2), angle, coord, coord, coord, coord, coord, coord)
def test_round_trip_and_psd(yaw, pitch, roll, px, py, pz, x, y, z):
    from ksran.sensors import PositionMeasurement

    pose = Pose((px, py, pz), yaw, pitch, roll)
    meta = SensorMeta("s", SensorKind.UWB, pose)
    world = np.array([x, y, z])
    cov = np.diag([0.01, 0.02, 0.05])
    s = SensState(meta, 0.0, PositionMeasurement("u", inverse_transform(pose, world), cov))
    (o,) = to_common_frame(s)
    assert np.allclose(o.position, world, atol=1e-9)
    assert np.allclose(o.covariance, o.covariance.T, atol=1e-15)
    assert np.linalg.eigvalsh(o.covariance).min() >= -1e-12
