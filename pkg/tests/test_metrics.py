import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq, least_squares, minimize_scalar
from scipy.spatial.transform import Rotation

from patientmesh.body_model import LIMB_KEYPOINTS, t_pose_vertices
from patientmesh.heatmap import KeypointSet
from patientmesh.metrics import (mpjpe_2d, mpjpe_3d, optimal_scale, pa_mpjpe, pck,
                                 procrustes_align, pve_t_sc, pve_t_sc_vertices,
                                 torso_diameter, write_reports_csv)

from oracles import random_rotation

NAMES = [n for n, _ in LIMB_KEYPOINTS]


def _objective(pred, gt, s, R, t):
    return float(np.sum((s * pred @ R.T + t - gt) ** 2))


def numeric_procrustes(pred, gt, rng, starts=4):
    def resid(x):
        R = Rotation.from_rotvec(x[1:4]).as_matrix()
        return (np.exp(x[0]) * pred @ R.T + x[4:] - gt).ravel()
    best = None
    for k in range(starts):
        x0 = np.zeros(7) if k == 0 else np.concatenate([[0.0], rng.normal(0, 1.5, 3), np.zeros(3)])
        r = least_squares(resid, x0, xtol=1e-15, ftol=1e-15, gtol=1e-15, method="lm")
        if best is None or r.cost < best.cost:
            best = r
    return 2 * best.cost


def test_procrustes_matches_numeric_minimizer(rng):
    for _ in range(5):
        gt = rng.normal(size=(12, 3))
        pred = gt @ random_rotation(rng).T * 1.3 + rng.normal(0, 0.2, (12, 3))
        T = procrustes_align(pred, gt)
        closed = _objective(pred, gt, T.scale, T.rotation, T.translation)
        assert abs(closed - numeric_procrustes(pred, gt, rng)) < 1e-6


def test_procrustes_exact_similarity(rng):
    gt = rng.normal(size=(12, 3))
    pred = 0.7 * gt @ random_rotation(rng).T + [1, -2, 3]
    assert pa_mpjpe(pred, gt).mean < 1e-9


def test_reflection_guard(rng):
    gt = rng.normal(size=(12, 3))
    mirrored = gt * [-1, 1, 1]
    T = procrustes_align(mirrored, gt)
    assert np.linalg.det(T.rotation) > 0
    assert pa_mpjpe(mirrored, gt).mean > 1.0


def test_procrustes_degenerate():
    pts = np.zeros((5, 3))
    pts[:, 0] = np.arange(5)
    with pytest.raises(ValueError):
        procrustes_align(pts, pts)


@settings(max_examples=30)
@given(st.floats(0.2, 5.0), st.integers(0, 10_000))
def test_pa_mpjpe_invariant_to_similarity_of_pred(s, seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(12, 3))
    pred = gt + rng.normal(0, 0.1, gt.shape)
    moved = s * pred @ random_rotation(rng).T + rng.normal(size=3)
    assert abs(pa_mpjpe(pred, gt).mean - pa_mpjpe(moved, gt).mean) < 1e-6


def test_pa_bounded_by_mpjpe(rng):
    gt = rng.normal(size=(4, 12, 3))
    pred = gt + rng.normal(0, 0.05, gt.shape)
    assert pa_mpjpe(pred, gt).mean <= mpjpe_3d(pred, gt).mean + 1e-9


def test_mpjpe_3d_units():
    gt = np.zeros((3, 3))
    pred = gt + [0.01, 0, 0]
    r = mpjpe_3d(pred, gt)
    assert np.isclose(r.mean, 10.0) and r.units == "mm"


def test_mpjpe_2d_visibility_and_units():
    gt = KeypointSet.from_coords([[0, 0], [10, 0]], [True, False])
    pred = np.array([[3.0, 4.0], [100, 100]])
    r = mpjpe_2d(pred, gt)
    assert r.mean == 5.0 and r.count == 1
    assert mpjpe_2d(pred, gt, px_to_cm=0.5).units == "cm"


def test_mpjpe_2d_nothing_visible():
    gt = KeypointSet.from_coords([[0, 0]], [False])
    with pytest.raises(ValueError):
        mpjpe_2d(np.zeros((1, 2)), gt)


def test_pck_boundary_counts_as_correct():
    gt = np.zeros((1, 2, 2))
    pred = np.array([[[2.0, 0.0], [2.0001, 0.0]]])
    r = pck(pred, gt, 0.2, 10.0)
    assert r.per_joint.tolist() == [1.0, 0.0]


def test_pck_rejects_nonpositive():
    with pytest.raises(ValueError):
        pck(np.zeros((2, 2)), np.zeros((2, 2)), 0.0, 1.0)


def test_torso_diameter():
    g = np.zeros((12, 2))
    g[NAMES.index("l_shoulder")] = [0, 10]
    g[NAMES.index("r_shoulder")] = [4, 10]
    g[NAMES.index("l_hip")] = [0, 0]
    g[NAMES.index("r_hip")] = [4, 0]
    assert np.allclose(torso_diameter(g, NAMES), [10.0])


def numeric_scale(P, G):
    f = lambda s: np.sum((s * P - G) ** 2)
    df = lambda s: 2.0 * np.sum(P * (s * P - G))
    return brentq(df, 1e-3, 1e3, xtol=1e-15, rtol=4 * np.finfo(float).eps), f


def test_optimal_scale_matches_numeric(mini, rng):
    vp = t_pose_vertices(mini, rng.normal(size=10)) * 1.1
    vg = t_pose_vertices(mini, rng.normal(size=10))
    P, G = vp - vp.mean(0), vg - vg.mean(0)
    s_num, f = numeric_scale(P, G)
    assert abs(optimal_scale(vp, vg) - s_num) < 1e-9
    coarse = minimize_scalar(f, bracket=(0.5, 2.0), tol=1e-12).x
    assert abs(coarse - s_num) < 1e-6


def test_pve_t_sc_scale_invariant(mini, rng):
    vp = t_pose_vertices(mini, rng.normal(size=10))
    vg = t_pose_vertices(mini, rng.normal(size=10))
    base = pve_t_sc_vertices(vp, vg).mean
    for k in (0.5, 0.8, 1.3, 2.0):
        assert abs(pve_t_sc_vertices(k * vp, vg).mean - base) < 1e-9


def test_pve_t_sc_zero_for_same_shape(mini, rng):
    b = rng.normal(size=(2, 10))
    assert pve_t_sc(b, b, mini).mean < 1e-9


def test_pve_t_sc_dimension_check(mini):
    with pytest.raises(ValueError):
        pve_t_sc(np.zeros(9), np.zeros(9), mini)


def test_write_reports_csv(tmp_path):
    r = mpjpe_3d(np.zeros((3, 3)), np.zeros((3, 3)))
    write_reports_csv(tmp_path / "m.csv", [r.as_row("heldout")])
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "dataset,metric,value,units,count"
    assert lines[1].startswith("heldout,mpjpe_3d,0.0,mm,")


def test_pa_bounded_by_mpjpe_per_sample(rng):
    gt = rng.normal(size=(20, 12, 3))
    pred = gt + rng.normal(0, 0.1, gt.shape)
    for p, g in zip(pred, gt):
        assert pa_mpjpe(p, g).mean <= mpjpe_3d(p, g).mean + 1e-9


def test_pck_monotone_in_alpha(rng):
    gt = rng.uniform(0, 100, (30, 12, 2))
    pred = gt + rng.normal(0, 5, gt.shape)
    vals = [pck(pred, gt, a, 40.0).mean for a in (0.5, 0.3, 0.2, 0.1, 0.05)]
    assert all(x >= y for x, y in zip(vals, vals[1:]))


def test_metrics_permutation_consistent(rng, mini):
    gt = rng.normal(size=(15, 12, 3))
    pred = gt + rng.normal(0, 0.05, gt.shape)
    perm = rng.permutation(15)
    for fn in (mpjpe_3d, pa_mpjpe):
        assert abs(fn(pred, gt).mean - fn(pred[perm], gt[perm]).mean) < 1e-12
    g2, p2 = gt[..., :2] * 100, pred[..., :2] * 100
    assert abs(mpjpe_2d(p2, g2).mean - mpjpe_2d(p2[perm], g2[perm]).mean) < 1e-12
    assert abs(pck(p2, g2, 0.2, 30.0).mean - pck(p2[perm], g2[perm], 0.2, 30.0).mean) < 1e-12
    b1, b2 = rng.normal(size=(2, 6, 10))
    perm = rng.permutation(6)
    assert abs(pve_t_sc(b1, b2, mini).mean - pve_t_sc(b1[perm], b2[perm], mini).mean) < 1e-12
