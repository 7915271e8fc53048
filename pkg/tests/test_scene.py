import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ksran.scene import (
    Aabb,
    InvalidInputError,
    Pose,
    RoutePlan,
    SceneModel,
    geofence_contains,
    los_clear,
    mirror_across_face,
    route_position_at,
    segment_intersects_aabb,
)
from oracles import sampled_hit, segment_box_distance

UNIT = Aabb((0, 0, 0), (1, 1, 1))
SQUARE = [(0, 0), (10, 0), (10, 10), (0, 10)]

coord = st.floats(-5, 5, allow_nan=False)
point = st.tuples(coord, coord, coord).map(np.array)


def test_segment_outside_all_slabs():
    assert not segment_intersects_aabb((-1, 0, 0), (-1, 5, 0), UNIT)


def test_segment_through_center():
    assert segment_intersects_aabb((-1, 0.5, 0.5), (2, 0.5, 0.5), UNIT)


def test_grazing_contact_on_face_counts():
    a, b = (0, -1, 0.5), (0, 2, 0.5)
    assert segment_intersects_aabb(a, b, UNIT)
    assert sampled_hit(a, b, UNIT.min, UNIT.max, n=30_001)


def test_degenerate_segment_rejected():
    with pytest.raises(InvalidInputError):
        segment_intersects_aabb((1, 1, 1), (1, 1, 1), UNIT)


def test_nonfinite_coordinates_rejected():
    with pytest.raises(InvalidInputError):
        segment_intersects_aabb((math.nan, 0, 0), (1, 1, 1), UNIT)


def test_inverted_box_rejected():
    with pytest.raises(InvalidInputError):
        Aabb((1, 0, 0), (0, 1, 1))


@settings(max_examples=300, deadline=None)
@given(point, point)
def test_segment_test_is_symmetric(a, b):
    if np.array_equal(a, b):
        return
    box = Aabb((-1, -2, 0), (1.5, 0.5, 2))
    assert segment_intersects_aabb(a, b, box) == segment_intersects_aabb(b, a, box)


def test_slab_method_agrees_with_sampling_oracle():
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(1000):
        lo = rng.uniform(-3, 2, 3)
        hi = lo + rng.uniform(0.1, 3, 3)
        a, b = rng.uniform(-5, 5, (2, 3))
        box = Aabb(lo, hi)
        if segment_box_distance(a, b, lo, hi) < 1e-6 and not sampled_hit(a, b, lo, hi):
            continue  # inside the boundary tolerance band
        if sampled_hit(a, b, lo, hi) != segment_intersects_aabb(a, b, box):
            # sampling can miss a thin crossing; fall back to the exact distance
            assert segment_intersects_aabb(a, b, box) == (segment_box_distance(a, b, lo, hi) < 1e-6)
        checked += 1
    assert checked > 900


def test_los_in_empty_scene():
    scene = SceneModel((), SQUARE)
    assert los_clear(scene, (1, 1, 1), (9, 9, 1))


def test_los_blocked_by_box_on_the_line():
    scene = SceneModel((Aabb((4, 4, 0), (6, 6, 2)),), SQUARE)
    assert not los_clear(scene, (1, 5, 1), (9, 5, 1))


def test_los_clear_when_box_is_beyond_the_receiver():
    box = Aabb((7, 4, 0), (8, 6, 2))
    scene = SceneModel((box,), SQUARE)
    a, b = (1, 5, 1), (6, 5, 1)
    assert los_clear(scene, a, b)
    assert not sampled_hit(a, b, box.min, box.max)


def test_los_endpoint_on_a_face_is_not_self_blocking():
    scene = SceneModel((UNIT,), SQUARE)
    assert los_clear(scene, (1, 0.5, 0.5), (3, 0.5, 0.5))


def test_mirror_examples():
    assert np.array_equal(mirror_across_face((1, 2, 3), 2, 0.0), [1, 2, -3])
    assert np.array_equal(mirror_across_face((0, 0, 0), 0, 2.0), [4, 0, 0])


@given(point, point, st.integers(0, 2), coord)
def test_mirror_is_an_isometric_involution(p, q, axis, offset):
    pp = mirror_across_face(p, axis, offset)
    assert np.allclose(mirror_across_face(pp, axis, offset), p, atol=1e-12)
    d0 = np.linalg.norm(p - q)
    d1 = np.linalg.norm(pp - mirror_across_face(q, axis, offset))
    assert abs(d0 - d1) <= 1e-9


def test_geofence_examples():
    scene = SceneModel((), SQUARE)
    assert geofence_contains(scene, (5, 5, 0))
    assert not geofence_contains(scene, (11, 5, 0))
    assert geofence_contains(scene, (10, 5, 0))


def test_geofence_orientation_does_not_matter():
    scene = SceneModel((), list(reversed(SQUARE)))
    assert geofence_contains(scene, (5, 5, 0))
    assert not geofence_contains(scene, (-0.5, 5, 0))


def test_nonconvex_geofence_rejected():
    with pytest.raises(InvalidInputError):
        SceneModel((), [(0, 0), (10, 0), (5, 2), (10, 10), (0, 10)])


def test_route_interpolation_and_clamping():
    route = RoutePlan(((0.0, (0, 0, 0)), (10.0, (10, 0, 0))))
    assert np.allclose(route_position_at(route, 5), (5, 0, 0))
    assert np.allclose(route_position_at(route, -1), (0, 0, 0))
    assert np.allclose(route_position_at(route, 2.5), (2.5, 0, 0))
    assert np.allclose(route_position_at(route, 99), (10, 0, 0))


def test_route_needs_increasing_times():
    with pytest.raises(InvalidInputError):
        RoutePlan(((1.0, (0, 0, 0)), (1.0, (1, 0, 0))))


@settings(deadline=None)
@given(st.lists(st.tuples(st.floats(0.1, 5), point), min_size=2, max_size=6), st.floats(-1, 40))
def test_route_is_lipschitz_in_time(steps, t):
    times = np.cumsum([s for s, _ in steps])
    route = RoutePlan(tuple((float(tt), p) for tt, (_, p) in zip(times, steps)))
    eps = 1e-4
    jump = np.linalg.norm(route_position_at(route, t + eps) - route_position_at(route, t))
    assert jump <= route.max_speed * eps * (1 + 1e-6) + 1e-12


def test_pose_round_trip():
    pose = Pose((1, 2, 3), 0.3, -0.2, 0.1)
    p = np.array([4.0, -1.0, 2.0])
    assert np.allclose(pose.to_world(pose.to_local(p)), p, atol=1e-12)
    assert np.allclose(pose.rotation @ pose.rotation.T, np.eye(3), atol=1e-12)


def test_pose_angles_validated():
    with pytest.raises(InvalidInputError):
        Pose((0, 0, 0), 4.0)
