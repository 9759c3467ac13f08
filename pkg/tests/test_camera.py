import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from patientmesh.camera import (OVERHEAD_ROTATION, CameraExtrinsics, CameraIntrinsics,
                                CameraSamplingConfig, invert, project, sample_camera)
from patientmesh.errors import ConfigError

from oracles import project_homogeneous, random_rotation


def test_principal_point_maps_to_optical_axis():
    intr = CameraIntrinsics()
    extr = CameraExtrinsics(np.eye(3), np.zeros(3))
    uv, vis = project(np.array([[0.0, 0.0, 2.0]]), intr, extr)
    assert np.allclose(uv, [[320, 240]]) and vis.all()


def test_matches_homogeneous_oracle(rng):
    intr = CameraIntrinsics(fx=480, fy=520, cx=300, cy=250)
    for _ in range(10):
        extr = CameraExtrinsics(random_rotation(rng), rng.normal(0, 0.3, 3) + [0, 0, 4])
        pts = rng.normal(0, 0.5, (50, 3))
        uv, _ = project(pts, intr, extr)
        ok = extr.to_camera(pts)[:, 2] > 0
        assert np.allclose(uv[ok], project_homogeneous(pts, intr, extr)[ok], rtol=1e-12, atol=1e-9)


def test_behind_camera_is_invisible_nan():
    extr = CameraExtrinsics(np.eye(3), np.zeros(3))
    uv, vis = project(np.array([[0, 0, -1.0], [0, 0, 0.0]]), CameraIntrinsics(), extr)
    assert not vis.any() and np.isnan(uv).all()


def test_outside_image_flagged():
    extr = CameraExtrinsics(np.eye(3), np.zeros(3))
    uv, vis = project(np.array([[10.0, 0, 1.0]]), CameraIntrinsics(), extr)
    assert np.isfinite(uv).all() and not vis[0]


@given(st.floats(0.1, 10.0))
def test_scaling_points_along_rays_keeps_pixels(k):
    rng = np.random.default_rng(3)
    pts = rng.normal(0, 0.3, (10, 3)) + [0, 0, 3]
    extr = CameraExtrinsics(np.eye(3), np.zeros(3))
    a, _ = project(pts, CameraIntrinsics(), extr)
    b, _ = project(pts * k, CameraIntrinsics(), extr)
    assert np.allclose(a, b, atol=1e-9)


def test_back_projection(rng):
    intr = CameraIntrinsics()
    extr = CameraExtrinsics(random_rotation(rng), [0.1, -0.2, 3.0])
    pts = rng.normal(0, 0.4, (20, 3))
    uv, _ = project(pts, intr, extr)
    z = extr.to_camera(pts)[:, 2]
    ray = np.stack([(uv[:, 0] - intr.cx) / intr.fx, (uv[:, 1] - intr.cy) / intr.fy, np.ones(20)], 1)
    world = invert(extr).to_camera(ray * z[:, None])
    assert np.allclose(world, pts, atol=1e-10)


def test_invert_round_trip(rng):
    extr = CameraExtrinsics(random_rotation(rng), rng.normal(size=3))
    p = rng.normal(size=(5, 3))
    assert np.allclose(invert(extr).to_camera(extr.to_camera(p)), p)


def test_array_round_trip(rng):
    extr = CameraExtrinsics(random_rotation(rng), rng.normal(size=3))
    back = CameraExtrinsics.from_array(extr.as_array())
    assert np.array_equal(back.rotation, extr.rotation)
    assert np.array_equal(back.translation, extr.translation)


def test_non_rotation_rejected():
    with pytest.raises(ValueError):
        CameraExtrinsics(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_bad_intrinsics_rejected():
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=-1)
    with pytest.raises(ValueError):
        CameraIntrinsics(cx=1000)


def test_sampling_stays_in_box():
    cfg = CameraSamplingConfig()
    rng = np.random.default_rng(0)
    ts = np.array([sample_camera(cfg, rng).translation for _ in range(2000)])
    for k, name in enumerate("xyz"):
        lo, hi = getattr(cfg, "t" + name)
        assert ts[:, k].min() >= lo and ts[:, k].max() <= hi
        assert abs(ts[:, k].mean() - 0.5 * (lo + hi)) < 0.02 * max(hi - lo, 1e-9) + 0.01


def test_fixed_rotation_is_overhead():
    e = sample_camera(CameraSamplingConfig(), np.random.default_rng(1))
    assert np.array_equal(e.rotation, OVERHEAD_ROTATION)
    # table normal (+y) points back toward the camera
    assert np.allclose(e.rotation @ [0, 1, 0], [0, 0, -1])


def test_roll_rotation_is_valid():
    e = sample_camera(CameraSamplingConfig(fixed_rotation=False), np.random.default_rng(2))
    assert np.allclose(e.rotation.T @ e.rotation, np.eye(3))


def test_empty_range_rejected():
    with pytest.raises(ConfigError):
        CameraSamplingConfig(tz=(3.0, 2.0))


def test_default_sampling_keeps_body_in_frame(mini):
    from patientmesh.body_model import pose
    from patientmesh.synthgen import supine_base_pose
    body = pose(mini, supine_base_pose(), np.zeros(10))
    rng = np.random.default_rng(0)
    inside = 0
    for _ in range(200):
        _, vis = project(body.vertices, CameraIntrinsics(), sample_camera(CameraSamplingConfig(), rng))
        inside += vis.all()
    assert inside >= 198


def test_doubling_camera_coordinates_is_exact(rng):
    extr = CameraExtrinsics(np.eye(3), np.zeros(3))
    pts = rng.normal(0, 0.5, (50, 3)) + [0, 0, 3]
    a, _ = project(pts, CameraIntrinsics(), extr)
    b, _ = project(2.0 * pts, CameraIntrinsics(), extr)
    assert np.array_equal(a, b)
