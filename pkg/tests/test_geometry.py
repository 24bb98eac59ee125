import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gestream import geometry as geo
from gestream.errors import DegenerateInput, InvalidRotation, TopologyError


def test_rot6d_round_trip(rng):
    for _ in range(50):
        m = geo.random_rotation(rng)
        a = geo.matrix_to_rot6d(m)
        back = geo.rot6d_to_matrix(a)
        np.testing.assert_allclose(back, m, atol=1e-12)


def test_rot6d_output_is_rotation(rng):
    # arbitrary (non-orthogonal) 6D inputs still map onto SO(3)
    a = rng.normal(size=(20, 6))
    m = geo.rot6d_to_matrix(a)
    for r in m:
        geo.validate_rotation(r)


def test_rot6d_degenerate_columns():
    with pytest.raises(DegenerateInput):
        geo.rot6d_to_matrix(np.zeros(6))
    with pytest.raises(DegenerateInput):
        geo.rot6d_to_matrix(np.array([1.0, 0, 0, 2.0, 0, 0]))  # parallel


def test_validate_rotation_rejects_reflection():
    m = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(InvalidRotation):
        geo.validate_rotation(m)


def test_geodesic_identity_and_known_angle():
    eye = np.eye(3)
    assert geo.geodesic_distance(eye, eye) == pytest.approx(0.0, abs=1e-9)
    half_pi = geo.axis_angle_matrix([0, 0, 1], np.pi / 2)
    assert geo.geodesic_distance(eye, half_pi) == pytest.approx(np.pi / 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 2 ** 31 - 1))
def test_geodesic_symmetry(s1, s2):
    m1 = geo.random_rotation(np.random.default_rng(s1))
    m2 = geo.random_rotation(np.random.default_rng(s2))
    d12 = geo.geodesic_distance(m1, m2)
    d21 = geo.geodesic_distance(m2, m1)
    assert d12 == pytest.approx(d21, abs=1e-9)
    assert 0.0 <= d12 <= np.pi + 1e-9


def test_skeleton_rejects_cycle():
    with pytest.raises(TopologyError):
        geo.SkeletonSpec(parent=np.array([1, 0]), offset=np.zeros((2, 3)),
                         region_map=["upper", "upper"], expr_dim=4)


def test_skeleton_rejects_two_roots():
    with pytest.raises(TopologyError):
        geo.SkeletonSpec(parent=np.array([-1, -1]), offset=np.zeros((2, 3)),
                         region_map=["upper", "upper"], expr_dim=4)


def test_default_skeleton_region_counts():
    spec = geo.default_skeleton(expr_dim=20)
    assert spec.j_upper == 16
    assert spec.j_lower == 8
    assert spec.j_face == 1
    assert spec.joint_count == 25


def test_fk_identity_pose_gives_rest_offsets():
    spec = geo.default_skeleton(expr_dim=4)
    rot = np.tile(np.eye(3), (spec.joint_count, 1, 1))
    pos = geo.forward_kinematics(spec, rot, np.zeros(3))
    # at identity, every joint's position is the sum of offsets to root
    for j in range(spec.joint_count):
        expect = np.zeros(3)
        node = j
        while node >= 0:
            expect += spec.offset[node]
            node = spec.parent[node]
        np.testing.assert_allclose(pos[j], expect, atol=1e-12)


def test_fk_translation_moves_all_joints():
    spec = geo.default_skeleton(expr_dim=4)
    rot = np.tile(np.eye(3), (spec.joint_count, 1, 1))
    t = np.array([1.0, 2.0, 3.0])
    base = geo.forward_kinematics(spec, rot, np.zeros(3))
    moved = geo.forward_kinematics(spec, rot, t)
    np.testing.assert_allclose(moved - base, np.tile(t, (spec.joint_count, 1)))


def test_fk_global_rotation_preserves_bone_lengths(rng):
    spec = geo.default_skeleton(expr_dim=4)
    rot = np.stack([geo.random_rotation(rng) for _ in range(spec.joint_count)])
    pos = geo.forward_kinematics(spec, rot, np.zeros(3))
    for j in range(spec.joint_count):
        p = spec.parent[j]
        if p < 0:
            continue
        got = np.linalg.norm(pos[j] - pos[p])
        assert got == pytest.approx(np.linalg.norm(spec.offset[j]), abs=1e-9)
