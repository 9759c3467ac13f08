"""Evaluation metrics: 2D MPJPE, PCK, 3D MPJPE, PA-MPJPE and PVE-T-SC.

Inputs are meters (3D) or pixels (2D); 3D reports are in millimeters.
Every function accepts a single frame (N, D) or a batch (F, N, D).
"""

import csv
from dataclasses import dataclass

import numpy as np

from .body_model import t_pose_vertices


@dataclass(frozen=True, eq=False)
class MetricReport:
    name: str
    per_joint: np.ndarray
    mean: float
    units: str
    count: int

    def as_row(self, dataset=""):
        return {"dataset": dataset, "metric": self.name, "value": self.mean,
                "units": self.units, "count": self.count}


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


def _batch(a, d):
    a = np.asarray(a, dtype=float)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[-1] != d:
        raise ValueError(f"expected (N, {d}) or (F, N, {d}) array, got {a.shape}")
    return a


def _report(name, err, mask, units):
    """Per-joint mean over frames where the joint is valid; overall mean is
    the average of the per-joint means."""
    counts = mask.sum(axis=0)
    per_joint = np.where(counts > 0, (err * mask).sum(axis=0) / np.maximum(counts, 1), np.nan)
    valid = counts > 0
    return MetricReport(name, per_joint, float(per_joint[valid].mean()), units, int(mask.sum()))


def _kp_arrays(kps):
    if hasattr(kps, "coords"):
        return np.asarray(kps.coords, float), np.asarray(kps.visibility, bool)
    arr = np.asarray(kps, float)
    return arr, np.ones(arr.shape[:-1], bool)


def mpjpe_2d(pred, gt, px_to_cm=None):
    """Mean 2D joint error over joints visible in both sets.

    pred/gt: KeypointSet or coordinate arrays (N, 2) / (F, N, 2).
    ``px_to_cm`` (scalar or per-frame array) switches the units to cm.
    """
    p, pv = _kp_arrays(pred)
    g, gv = _kp_arrays(gt)
    p, g = _batch(p, 2), _batch(g, 2)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    mask = (pv & gv).reshape(p.shape[:2])
    if not mask.any():
        raise ValueError("no joints visible in both prediction and ground truth")
    err = np.linalg.norm(np.where(mask[..., None], p - g, 0.0), axis=-1)
    units = "px"
    if px_to_cm is not None:
        err = err * np.broadcast_to(np.asarray(px_to_cm, float).reshape(-1, 1), err.shape)
        units = "cm"
    return _report("mpjpe_2d", err, mask, units)


def torso_diameter(gt, names):
    """Distance mid-shoulder to mid-hip per frame (px)."""
    g = _batch(_kp_arrays(gt)[0], 2)
    idx = {n: names.index(n) for n in ("l_shoulder", "r_shoulder", "l_hip", "r_hip")}
    shoulders = 0.5 * (g[:, idx["l_shoulder"]] + g[:, idx["r_shoulder"]])
    hips = 0.5 * (g[:, idx["l_hip"]] + g[:, idx["r_hip"]])
    return np.linalg.norm(shoulders - hips, axis=-1)


def pck(pred, gt, alpha, norm_length):
    """Fraction of frames with error <= alpha * norm_length, per joint.

    ``norm_length`` is a scalar or one value per frame.  The threshold is
    closed (an error exactly on it counts as correct).
    """
    if alpha <= 0 or np.any(np.asarray(norm_length) <= 0):
        raise ValueError("alpha and norm_length must be positive")
    p, pv = _kp_arrays(pred)
    g, gv = _kp_arrays(gt)
    p, g = _batch(p, 2), _batch(g, 2)
    gv = np.broadcast_to(gv, g.shape[:-1]).reshape(g.shape[:2])
    pv = np.broadcast_to(pv, p.shape[:-1]).reshape(p.shape[:2])
    thresh = alpha * np.broadcast_to(np.asarray(norm_length, float).reshape(-1, 1), g.shape[:2])
    err = np.linalg.norm(p - g, axis=-1)
    correct = (err <= thresh) & pv
    return _report("pck", correct.astype(float), gv, "fraction")


def procrustes_align(pred, gt) -> SimilarityTransform:
    """Similarity transform minimizing sum |s R pred_i + t - gt_i|^2.

    Closed form from the SVD of the centered cross-covariance with a
    reflection guard on the smallest singular direction.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[0] < 3:
        raise ValueError("need matching (N>=3, 3) point sets")
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    P, G = pred - mu_p, gt - mu_g
    sv_g = np.linalg.svd(G, compute_uv=False)
    sv_p = np.linalg.svd(P, compute_uv=False)
    tol = 1e-9 * max(sv_g[0], sv_p[0], 1e-300)
    if (sv_g > tol).sum() < 2 or (sv_p > tol).sum() < 2:
        raise ValueError("degenerate configuration: point set rank < 2")
    U, S, Vt = np.linalg.svd(P.T @ G)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    s = float(np.trace(np.diag(S) @ D) / np.sum(P * P))
    t = mu_g - s * R @ mu_p
    return SimilarityTransform(s, R, t)


def mpjpe_3d(pred, gt):
    p, g = _batch(pred, 3), _batch(gt, 3)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    err = 1000.0 * np.linalg.norm(p - g, axis=-1)
    return _report("mpjpe_3d", err, np.ones(err.shape, bool), "mm")


def pa_mpjpe(pred, gt):
    p, g = _batch(pred, 3), _batch(gt, 3)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    aligned = np.stack([procrustes_align(pi, gi).apply(pi) for pi, gi in zip(p, g)])
    err = 1000.0 * np.linalg.norm(aligned - g, axis=-1)
    return _report("pa_mpjpe", err, np.ones(err.shape, bool), "mm")


def optimal_scale(v_pred, v_gt):
    """Closed-form s* = <P, G> / <P, P> on centered vertex sets."""
    P = v_pred - v_pred.mean(axis=0)
    G = v_gt - v_gt.mean(axis=0)
    return float(np.sum(P * G) / np.sum(P * P))


def pve_t_sc_vertices(v_pred, v_gt):
    """Scale-corrected mean per-vertex error (mm) between two T-pose meshes."""
    v_pred, v_gt = _batch(v_pred, 3), _batch(v_gt, 3)
    errs = []
    for vp, vg in zip(v_pred, v_gt):
        P = vp - vp.mean(axis=0)
        G = vg - vg.mean(axis=0)
        s = optimal_scale(vp, vg)
        errs.append(1000.0 * np.linalg.norm(s * P - G, axis=-1))
    err = np.stack(errs)
    return _report("pve_t_sc", err, np.ones(err.shape, bool), "mm")


def pve_t_sc(beta_pred, beta_gt, model):
    beta_pred = np.atleast_2d(np.asarray(beta_pred, float))
    beta_gt = np.atleast_2d(np.asarray(beta_gt, float))
    if beta_pred.shape != beta_gt.shape or beta_pred.shape[1] != model.num_betas:
        raise ValueError("beta dimension mismatch")
    vp = np.stack([t_pose_vertices(model, b) for b in beta_pred])
    vg = np.stack([t_pose_vertices(model, b) for b in beta_gt])
    return pve_t_sc_vertices(vp, vg)


def write_reports_csv(path, rows):
    fields = ["dataset", "metric", "value", "units", "count"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in fields})
