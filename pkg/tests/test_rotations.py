import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from patientmesh.rotations import (SMALL_ANGLE, axis_angle_jacobian, axis_angle_to_matrix,
                                   matrix_to_axis_angle, skew)

vec3 = arrays(np.float64, 3, elements=st.floats(-3.0, 3.0))


def test_zero_is_identity_exactly():
    assert np.array_equal(axis_angle_to_matrix(np.zeros(3)), np.eye(3))


def test_quarter_turn_about_z():
    R = axis_angle_to_matrix([0, 0, np.pi / 2])
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)


@given(vec3)
def test_matches_scipy(v):
    assert np.allclose(axis_angle_to_matrix(v), Rotation.from_rotvec(v).as_matrix(), atol=1e-12)


@given(vec3)
def test_orthonormal(v):
    R = axis_angle_to_matrix(v)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(R) - 1) < 1e-12


def test_taylor_branch_is_continuous():
    axis = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
    below = axis_angle_to_matrix(axis * SMALL_ANGLE * 0.999)
    above = axis_angle_to_matrix(axis * SMALL_ANGLE * 1.001)
    assert np.abs(below - above).max() < 1e-9


def test_skew_is_cross_product(rng):
    a, b = rng.normal(size=(2, 3))
    assert np.allclose(skew(a) @ b, np.cross(a, b))


@settings(max_examples=40)
@given(vec3)
def test_jacobian_matches_finite_differences(v):
    _, dR = axis_angle_jacobian(v)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        num = (axis_angle_to_matrix(v + e) - axis_angle_to_matrix(v - e)) / (2 * h)
        assert np.abs(num - dR[i]).max() < 1e-7


def test_jacobian_near_zero():
    for v in (np.zeros(3), np.array([1e-9, -2e-9, 5e-10])):
        _, dR = axis_angle_jacobian(v)
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1e-6
            num = (axis_angle_to_matrix(v + e) - axis_angle_to_matrix(v - e)) / 2e-6
            assert np.abs(num - dR[i]).max() < 1e-8


def test_batched_shapes():
    v = np.random.default_rng(0).normal(size=(4, 5, 3))
    R, dR = axis_angle_jacobian(v)
    assert R.shape == (4, 5, 3, 3) and dR.shape == (4, 5, 3, 3, 3)


def test_round_trip(rng):
    v = rng.normal(size=(20, 3))
    v = v / np.linalg.norm(v, axis=1, keepdims=True) * rng.uniform(0, 3.0, (20, 1))
    assert np.allclose(matrix_to_axis_angle(axis_angle_to_matrix(v)), v, atol=1e-10)
