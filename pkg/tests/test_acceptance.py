"""End-to-end acceptance checks, one test per criterion.

Criteria 4, 9 and 10 share the expensive artifacts: the 20k training set,
the 2k held-out set and the default regressor trained on them.  Training
runs through the CLI in a subprocess with BLAS limited to one thread.
"""

import os
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.optimize import brentq, least_squares
from scipy.spatial.transform import Rotation

from patientmesh import config as C
from patientmesh.body_model import pose, pose_joints_batch, t_pose_vertices
from patientmesh.camera import CameraExtrinsics
from patientmesh.cli import main, simulation_keypoints
from patientmesh.fusion import fusion_label, run_simulation
from patientmesh.heatmap import argmax_coords, render_grids, soft_argmax_coords
from patientmesh.isocenter import (ScannerCalibration, apply_displacement,
                                   calibration_from_extrinsics, estimate, iso_error, region_mask,
                                   thickness)
from patientmesh.metrics import (optimal_scale, pa_mpjpe, procrustes_align, pve_t_sc_vertices)
from patientmesh.regressor import (JointFK, encode_inputs, fit_input_normalization, grad_check,
                                   init_net, load_checkpoint, predict, record_transform, spec_for)
from patientmesh.synthgen import (dataset_digest, load_dataset, record_rng, sample_pair,
                                  supine_base_pose)

from oracles import naive_pose, random_rotation

SINGLE_THREAD = {k: "1" for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")}


# --------------------------------------------------------------------------
# shared artifacts


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def gen_timings():
    return {}


@pytest.fixture(scope="module")
def train_data(work, gen_timings):
    t = time.perf_counter()
    assert main(["gen-data", "--count", "20000", "--seed", "7", "--workers", "1",
                 "--out", str(work / "train_w1")]) == 0
    gen_timings["w1"] = time.perf_counter() - t
    return work / "train_w1"


@pytest.fixture(scope="module")
def heldout_data(work):
    # different seed and a different pose bank: no record overlaps training
    assert main(["gen-data", "--count", "2000", "--seed", "8", "--set", "pose_bank.seed=1",
                 "--out", str(work / "heldout")]) == 0
    return work / "heldout"


def _train_once(data, out):
    env = dict(os.environ, **SINGLE_THREAD)
    t = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "patientmesh.cli", "train", "--data", str(data),
                           "--seed", "0", "--out", str(out)], env=env, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return out / "regressor.ckpt", time.perf_counter() - t


@pytest.fixture(scope="module")
def trained(work, train_data):
    ckpt, seconds = _train_once(train_data, work / "run1")
    return ckpt, seconds


@pytest.fixture(scope="module")
def heldout_eval(mini, train_data, heldout_data, trained):
    """Held-out PA MPJPE for trained, untrained and mean-pose predictors."""
    ckpt, _ = trained
    net, _ = load_checkpoint(ckpt)
    spec = net.input_spec
    te = load_dataset(heldout_data, mini, record_transform(spec))
    tr = load_dataset(train_data, mini, record_transform(spec))
    _, k_true = pose_joints_batch(mini, te.theta, te.beta)

    def pa(theta, beta):
        _, k = pose_joints_batch(mini, theta, beta)
        return pa_mpjpe(k, k_true).mean

    tcfg = C.train_config(C.load_config())
    untrained = init_net(spec, tcfg.hidden, tcfg.seed)
    fit_input_normalization(untrained, tr.heatmaps)
    n = len(te.ids)
    mean_theta = np.tile(tr.theta.mean(axis=0), (n, 1))
    mean_beta = np.tile(tr.beta.mean(axis=0), (n, 1))
    th_hat, be_hat = predict(net, te.heatmaps)
    return {
        "net": net, "heldout": te, "theta_hat": th_hat, "beta_hat": be_hat,
        "trained": pa(th_hat, be_hat),
        "untrained": pa(*predict(untrained, te.heatmaps)),
        "mean_pose": pa(mean_theta, mean_beta),
    }


# --------------------------------------------------------------------------
# criteria


def test_criterion_01_lbs_oracle(mini, acceptance_log):
    rng = np.random.default_rng(101)
    t = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        theta, beta = rng.normal(0, 0.5, 72), rng.normal(0, 1, 10)
        v_ref, _ = naive_pose(mini, theta, beta)
        worst = max(worst, np.abs(pose(mini, theta, beta).vertices - v_ref).max())
    secs = time.perf_counter() - t
    ok = acceptance_log(1, "LBS oracle equivalence", worst < 1e-9 and secs < 10,
                        f"max deviation {worst:.2e} m over 100 poses, {secs:.1f} s")
    assert ok


def _numeric_alignment(pred, gt, rng):
    def resid(x):
        R = Rotation.from_rotvec(x[1:4]).as_matrix()
        return (np.exp(x[0]) * pred @ R.T + x[4:] - gt).ravel()
    best = np.inf
    for k in range(4):
        x0 = np.zeros(7) if k == 0 else np.concatenate([[0.0], rng.normal(0, 1.5, 3), np.zeros(3)])
        r = least_squares(resid, x0, xtol=1e-15, ftol=1e-15, gtol=1e-15, method="lm")
        best = min(best, 2 * r.cost)
    return best


def test_criterion_02_procrustes_oracle(acceptance_log):
    rng = np.random.default_rng(202)
    t = time.perf_counter()
    gap, pa_exact = 0.0, 0.0
    for _ in range(50):
        gt = rng.normal(size=(12, 3))
        noisy = rng.uniform(0.5, 2.0) * gt @ random_rotation(rng).T + rng.normal(0, 0.3, (12, 3))
        T = procrustes_align(noisy, gt)
        closed = float(np.sum((T.apply(noisy) - gt) ** 2))
        gap = max(gap, abs(closed - _numeric_alignment(noisy, gt, rng)))
        exact = rng.uniform(0.5, 2.0) * gt @ random_rotation(rng).T + rng.normal(size=3)
        pa_exact = max(pa_exact, pa_mpjpe(exact, gt).mean)
    secs = time.perf_counter() - t
    ok = acceptance_log(2, "Procrustes oracle", gap < 1e-6 and pa_exact < 1e-9 and secs < 30,
                        f"objective gap {gap:.2e}, exact-similarity PA {pa_exact:.2e} mm, {secs:.1f} s")
    assert ok


def test_criterion_03_gradient_verification(mini, small_bank, acceptance_log):
    doc = C.load_config()
    tcfg, hp, gcfg = C.train_config(doc), C.heatmap_params(doc), C.gen_config(doc)
    net = init_net(spec_for(tcfg, mini.num_keypoints, hp.resolution, hp.stride, hp.origin),
                   tcfg.hidden, seed=3)
    fk = JointFK(mini)
    t = time.perf_counter()
    worst = 0.0
    for i in range(10):
        p = sample_pair(mini, small_bank, gcfg, record_rng(303, i), i)
        x = encode_inputs(p.heatmaps.grids, net.input_spec, np.float64)
        rep = grad_check(net, (x, p.theta[None], p.beta[None]), fk, 1e-4, tcfg.weights, step=1e-5, seed=i)
        worst = max(worst, rep.max_rel_error)
    secs = time.perf_counter() - t
    ok = acceptance_log(3, "gradient verification", worst < 1e-4 and secs < 60,
                        f"max relative error {worst:.2e} over 10 samples, {secs:.1f} s")
    assert ok


def test_criterion_04_closed_loop_regression(heldout_eval, trained, gen_timings, acceptance_log):
    r = heldout_eval
    secs = gen_timings["w1"] + trained[1]
    improvement = 1.0 - r["trained"] / r["untrained"]
    ok = improvement >= 0.5 and r["trained"] < r["mean_pose"] and secs < 15 * 60
    acceptance_log(4, "closed-loop regression", ok,
                   f"held-out PA MPJPE {r['trained']:.1f} mm vs untrained {r['untrained']:.1f} mm "
                   f"({100 * improvement:.0f}% better) and mean pose {r['mean_pose']:.1f} mm; "
                   f"gen+train {secs / 60:.1f} min")
    assert ok


def test_criterion_05_fusion_benefit(mini, acceptance_log):
    doc = C.load_config()
    cfg = C.fusion_config(doc)
    t = time.perf_counter()
    coords, vis = simulation_keypoints(doc, mini, cfg.frames)
    rep, _ = run_simulation(coords, vis, cfg)
    secs = time.perf_counter() - t
    fused, a, b = rep["mpjpe_fused_px"], rep["mpjpe_first_px"], rep["mpjpe_second_px"]
    ok = rep["classifier_accuracy"] >= 0.9 and fused <= a and fused <= b and secs < 300
    acceptance_log(5, "fusion benefit", ok,
                   f"accuracy {rep['classifier_accuracy']:.3f}, MPJPE fused {fused:.2f} px vs "
                   f"{a:.2f} / {b:.2f} px, {secs:.0f} s")
    assert ok


def test_criterion_06_fusion_label_rule(acceptance_log):
    t = time.perf_counter()
    values = np.unique(np.concatenate([np.linspace(0, 5, 51), [1e-12, 1 - 1e-12, 1 + 1e-12, 1e6]]))
    mismatches, asym = 0, 0
    for a in values:
        for b in values:
            expected = 0 if a > b else 1
            got = fusion_label(float(a), float(b))
            mismatches += got != expected
            if a != b:
                asym += got != 1 - fusion_label(float(b), float(a))
    ties = [fusion_label(float(v), float(v)) for v in values]
    secs = time.perf_counter() - t
    ok = mismatches == 0 and asym == 0 and set(ties) == {1} and fusion_label(4.0, 4.0) == 1 and secs < 1
    acceptance_log(6, "fusion label rule", ok,
                   f"{len(values) ** 2} pairs, {mismatches} mismatches, ties -> {sorted(set(ties))}, "
                   f"{1000 * secs:.0f} ms")
    assert ok


def test_criterion_07_heatmap_round_trip(acceptance_log):
    rng = np.random.default_rng(707)
    res, stride, sigma = (64, 64), 4.0, 8.0
    extent = np.array([res[1] * stride, res[0] * stride])
    t = time.perf_counter()
    xy = rng.uniform(0, 1, (1000, 2)) * extent
    g = render_grids(xy, np.ones(1000, bool), res, stride, sigma)
    am, _ = argmax_coords(g, stride)
    # quantization bound, per image axis
    arg_err = np.abs(am - xy).max()
    sa, _ = soft_argmax_coords(g, stride)
    inner = np.all((xy >= 3 * sigma) & (xy <= extent - 3 * sigma), axis=1)
    soft_err = np.linalg.norm(sa - xy, axis=1)[inner].max()
    secs = time.perf_counter() - t
    ok = arg_err <= 0.5 * stride and soft_err <= 0.1 and secs < 10
    acceptance_log(7, "heatmap round-trip", ok,
                   f"argmax max error {arg_err:.3f} px (bound {0.5 * stride}), soft-argmax "
                   f"{soft_err:.4f} px on {inner.sum()} interior peaks, {secs:.2f} s")
    assert ok


def test_criterion_08_pve_t_sc_scale_invariance(mini, acceptance_log):
    rng = np.random.default_rng(808)
    t = time.perf_counter()
    change, s_gap = 0.0, 0.0
    for _ in range(20):
        vp = t_pose_vertices(mini, rng.normal(size=10))
        vg = t_pose_vertices(mini, rng.normal(size=10))
        base = pve_t_sc_vertices(vp, vg).mean
        for k in np.linspace(0.5, 2.0, 16):
            change = max(change, abs(pve_t_sc_vertices(k * vp, vg).mean - base))
        P, G = vp - vp.mean(0), vg - vg.mean(0)
        # stationary point of the 1-D objective, located numerically
        s_num = brentq(lambda s: np.sum(P * (s * P - G)), 1e-3, 1e3, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        s_gap = max(s_gap, abs(optimal_scale(vp, vg) - s_num))
    secs = time.perf_counter() - t
    ok = change < 1e-9 and s_gap < 1e-9 and secs < 10
    acceptance_log(8, "PVE-T-SC scale invariance", ok,
                   f"max change {change:.2e} mm over scales [0.5, 2], s* gap {s_gap:.2e}, {secs:.1f} s")
    assert ok


def test_criterion_09_isocentering(mini, heldout_eval, acceptance_log):
    t = time.perf_counter()
    rng = np.random.default_rng(909)
    # oracle checks on a known supine body in a rotated scanner frame
    body = pose(mini, supine_base_pose(), rng.normal(size=10))
    calib = ScannerCalibration(random_rotation(rng), rng.normal(size=3), [0, 1, 0], [0, 1.1, 0], 0.0)
    oracle_gap, align_gap = 0.0, 0.0
    for name in ("abdomen", "thorax", "head"):
        reg = region_mask(mini, name)
        r = thickness(body, reg, calib)
        h = [float((calib.rotation @ body.vertices[i] + calib.translation) @ calib.table_normal)
             for i in reg.indices]
        oracle_gap = max(oracle_gap, abs(r.thickness_mm - 1000 * (max(h) - min(h))),
                         abs(r.center_height_mm - 500 * (max(h) + min(h))))
        moved = thickness(apply_displacement(body, r, calib), reg, calib)
        align_gap = max(align_gap, abs(moved.center_height_mm - r.isocenter_height_mm))

    # end to end: ideal heatmaps -> trained regressor -> table displacement
    te, th_hat, be_hat = heldout_eval["heldout"], heldout_eval["theta_hat"], heldout_eval["beta_hat"]
    errs = {}
    for name in ("abdomen", "thorax", "head"):
        reg = region_mask(mini, name)
        e = []
        for i in range(200):
            extr = CameraExtrinsics.from_array(_orthonormalize(te.extrinsics[i]))
            c = calibration_from_extrinsics(extr, table_height=-0.15, isocenter=[0.0, 0.0, 0.0])
            truth = estimate(pose(mini, te.theta[i], te.beta[i]), reg, c)
            pred = estimate(pose(mini, th_hat[i], be_hat[i]), reg, c)
            e.append(iso_error(pred, truth.center_height_mm))
        errs[name] = float(np.mean(e))
    secs = time.perf_counter() - t
    ok = oracle_gap < 1e-9 and align_gap < 1e-9 and max(errs.values()) < 15 and secs < 120
    acceptance_log(9, "isocentering closed loop", ok,
                   f"oracle gap {oracle_gap:.1e} mm, alignment {align_gap:.1e} mm, end-to-end mean error "
                   + ", ".join(f"{k} {v:.1f}" for k, v in errs.items()) + f" mm, {secs:.0f} s")
    assert ok


def _orthonormalize(values):
    values = np.array(values, float)
    U, _, Vt = np.linalg.svd(values[:9].reshape(3, 3))
    values[:9] = (U @ Vt).ravel()
    return values


def test_criterion_10_determinism(work, train_data, trained, gen_timings, acceptance_log):
    t = time.perf_counter()
    assert main(["gen-data", "--count", "20000", "--seed", "7", "--workers", "4",
                 "--out", str(work / "train_w4")]) == 0
    gen4 = time.perf_counter() - t
    same_data = dataset_digest(train_data) == dataset_digest(work / "train_w4")
    ckpt2, train2 = _train_once(train_data, work / "run2")
    same_ckpt = trained[0].read_bytes() == ckpt2.read_bytes()
    secs = gen_timings["w1"] + gen4 + trained[1] + train2
    ok = same_data and same_ckpt and secs < 20 * 60
    acceptance_log(10, "determinism and parallel equivalence", ok,
                   f"1 vs 4 workers identical: {same_data}; two training runs identical: {same_ckpt}; "
                   f"{secs / 60:.1f} min")
    assert ok


# --------------------------------------------------------------------------
# dataset-level invariants that need the full training set


def test_label_coverage(train_data):
    ds = load_dataset(train_data, None, lambda g: np.zeros(0, np.float32), validate=False)
    kp = ds.keypoints
    vis = kp[..., 2] > 0.5
    intr = C.intrinsics(C.load_config())
    hx = np.histogram(kp[..., 0][vis], bins=10, range=(0, intr.width))[0]
    hy = np.histogram(kp[..., 1][vis], bins=10, range=(0, intr.height))[0]
    assert (hx > 0).mean() >= 0.8 and (hy > 0).mean() >= 0.8


def test_smoothed_training_loss_is_non_increasing(trained):
    import csv
    rows = list(csv.DictReader(open(trained[0].parent / "loss_curve.csv")))
    loss = np.array([float(r["loss"]) for r in rows])
    smooth = np.convolve(loss, np.ones(5) / 5, mode="valid")
    half = smooth[len(smooth) // 2:]
    assert np.all(np.diff(half) <= 0)
