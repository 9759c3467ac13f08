"""SMPL-structured parametric body model: shape/pose blend shapes, joint
regression and linear blend skinning over a 24-joint kinematic tree.

All lengths are meters.  ``make_mini_model`` builds a small procedural
stand-in ("MiniBody") with the same joint layout and parameter sizes as
SMPL, so the whole pipeline runs without licensed assets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import lsq_linear

from .errors import DataFormatError, InvariantError
from .rotations import axis_angle_to_matrix

NUM_JOINTS = 24
NUM_BETAS = 10
FORMAT_VERSION = 1

JOINT_NAMES = [
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist", "l_hand", "r_hand",
]
SMPL_PARENTS = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14,
                16, 17, 18, 19, 20, 21]

# Column order of the 12-keypoint evaluation set:
# R.Ak R.Kn R.H L.H L.Kn L.Ak R.Wr R.Eb R.Sh L.Sh L.Eb L.Wr
LIMB_KEYPOINTS = [
    ("r_ankle", 8), ("r_knee", 5), ("r_hip", 2), ("l_hip", 1),
    ("l_knee", 4), ("l_ankle", 7), ("r_wrist", 21), ("r_elbow", 19),
    ("r_shoulder", 17), ("l_shoulder", 16), ("l_elbow", 18), ("l_wrist", 20),
]

REGION_NAMES = ("abdomen", "thorax", "head")


@dataclass(frozen=True)
class Keypoint:
    name: str
    index: int
    kind: str = "joint"  # "joint" | "vertex"


@dataclass(frozen=True, eq=False)
class BodyModel:
    template_vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    shape_dirs: np.ndarray  # (V, 3, 10)
    pose_dirs: np.ndarray  # (V, 3, 9*(J-1))
    joint_regressor: np.ndarray  # (J, V)
    skin_weights: np.ndarray  # (V, J)
    kinematic_parents: np.ndarray  # (J,) int, parents[0] == -1
    keypoint_map: tuple = ()
    regions: dict = field(default_factory=dict)

    @property
    def num_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def num_joints(self):
        return self.joint_regressor.shape[0]

    @property
    def num_betas(self):
        return self.shape_dirs.shape[2]

    @property
    def num_keypoints(self):
        return len(self.keypoint_map)

    @property
    def keypoint_names(self):
        return [k.name for k in self.keypoint_map]

    def keypoint_index(self, name):
        return self.keypoint_names.index(name)


@dataclass(frozen=True, eq=False)
class PosedBody:
    vertices: np.ndarray  # (V, 3)
    joints: np.ndarray  # (J, 3)
    keypoints_3d: np.ndarray  # (N_J, 3)


# --------------------------------------------------------------------------
# validation


def _freeze(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def validate(model: BodyModel, atol=1e-6):
    """Raise InvariantError naming the first violated field."""
    V = model.template_vertices.shape[0]
    J = model.joint_regressor.shape[0] if model.joint_regressor.ndim == 2 else -1

    def check_shape(name, arr, shape):
        if arr.shape != shape:
            raise InvariantError(name, f"expected shape {shape}, got {arr.shape}")

    if model.template_vertices.ndim != 2 or model.template_vertices.shape[1] != 3:
        raise InvariantError("template_vertices", f"bad shape {model.template_vertices.shape}")
    if J < 2:
        raise InvariantError("joint_regressor", f"bad shape {model.joint_regressor.shape}")
    check_shape("joint_regressor", model.joint_regressor, (J, V))
    check_shape("skin_weights", model.skin_weights, (V, J))
    check_shape("kinematic_parents", model.kinematic_parents, (J,))
    if model.shape_dirs.ndim != 3 or model.shape_dirs.shape[:2] != (V, 3):
        raise InvariantError("shape_dirs", f"bad shape {model.shape_dirs.shape}")
    check_shape("pose_dirs", model.pose_dirs, (V, 3, 9 * (J - 1)))
    if model.faces.ndim != 2 or model.faces.shape[1] != 3:
        raise InvariantError("faces", f"bad shape {model.faces.shape}")
    if model.faces.size and (model.faces.min() < 0 or model.faces.max() >= V):
        raise InvariantError("faces", "vertex index out of range")

    for name in ("template_vertices", "shape_dirs", "pose_dirs",
                 "joint_regressor", "skin_weights"):
        if not np.all(np.isfinite(getattr(model, name))):
            raise InvariantError(name, "non-finite entries")

    for name in ("joint_regressor", "skin_weights"):
        arr = getattr(model, name)
        if np.any(arr < 0):
            raise InvariantError(name, "negative weights")
        sums = arr.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > atol)
        if bad.size:
            raise InvariantError(name, f"row {bad[0]} sums to {sums[bad[0]]:.6g}, expected 1")

    parents = model.kinematic_parents
    if parents[0] != -1:
        raise InvariantError("kinematic_parents", "parent[0] must be -1 (root sentinel)")
    for j in range(1, J):
        if not 0 <= parents[j] < j:
            raise InvariantError("kinematic_parents", f"joint {j} has parent {parents[j]}")

    for kp in model.keypoint_map:
        limit = J if kp.kind == "joint" else V
        if kp.kind not in ("joint", "vertex") or not 0 <= kp.index < limit:
            raise InvariantError("keypoint_map", f"bad entry {kp}")

    for name, idx in model.regions.items():
        idx = np.asarray(idx)
        if idx.size == 0 or idx.min() < 0 or idx.max() >= V:
            raise InvariantError("regions", f"region {name!r} empty or out of range")


def _build(**kw):
    kw["kinematic_parents"] = np.asarray(kw["kinematic_parents"], dtype=np.int64)
    kw["faces"] = np.asarray(kw["faces"], dtype=np.int64)
    for name in ("template_vertices", "shape_dirs", "pose_dirs",
                 "joint_regressor", "skin_weights"):
        kw[name] = np.asarray(kw[name], dtype=np.float64)
    kw["regions"] = {k: _freeze(np.asarray(v, dtype=np.int64))
                     for k, v in kw.get("regions", {}).items()}
    for k, v in list(kw.items()):
        if isinstance(v, np.ndarray):
            kw[k] = _freeze(v)
    model = BodyModel(**kw)
    validate(model)
    return model


# --------------------------------------------------------------------------
# forward model


def _as_theta(model, theta):
    theta = np.asarray(theta, dtype=float)
    if theta.size != 3 * model.num_joints:
        raise ValueError(f"theta has {theta.size} values, model needs {3 * model.num_joints}")
    return theta.reshape(model.num_joints, 3)


def _as_beta(model, beta):
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if beta.size != model.num_betas:
        raise ValueError(f"beta has {beta.size} values, model needs {model.num_betas}")
    return beta


def forward_kinematics(rots, rest_joints, parents):
    """Compose local rotations down the tree.

    rots: (..., J, 3, 3); rest_joints: (..., J, 3).
    Returns global rotations (..., J, 3, 3), posed joint positions (..., J, 3)
    and skinning translations (..., J, 3) such that a rest-pose point ``x``
    bound to joint j goes to ``Rg_j x + t_j``.

    The translations use t_k = t_parent + Rg_parent (J_k - R_k J_k), which is
    exactly zero when every R_k is the identity.
    """
    J = rots.shape[-3]
    rg = np.empty_like(rots)
    t = np.empty_like(rest_joints)
    rg[..., 0, :, :] = rots[..., 0, :, :]
    j0 = rest_joints[..., 0, :]
    t[..., 0, :] = j0 - np.einsum("...ab,...b->...a", rots[..., 0, :, :], j0)
    for k in range(1, J):
        p = parents[k]
        rg[..., k, :, :] = rg[..., p, :, :] @ rots[..., k, :, :]
        jk = rest_joints[..., k, :]
        local = jk - np.einsum("...ab,...b->...a", rots[..., k, :, :], jk)
        t[..., k, :] = t[..., p, :] + np.einsum("...ab,...b->...a", rg[..., p, :, :], local)
    joints = np.einsum("...jab,...jb->...ja", rg, rest_joints) + t
    return rg, joints, t


def shaped_template(model: BodyModel, beta):
    beta = _as_beta(model, beta)
    return model.template_vertices + model.shape_dirs @ beta


def pose(model: BodyModel, theta, beta) -> PosedBody:
    """Pose the model: shape blend, joint regression, pose blend, LBS."""
    theta = _as_theta(model, theta)
    v_shaped = shaped_template(model, beta)
    rest_joints = model.joint_regressor @ v_shaped
    rots = axis_angle_to_matrix(theta)
    eye = np.eye(3)
    pose_feature = (rots[1:] - eye).reshape(-1)
    v_posed = v_shaped + model.pose_dirs @ pose_feature
    rg, joints, t = forward_kinematics(rots, rest_joints, model.kinematic_parents)

    W = model.skin_weights
    # v' = v + sum_j w_j ((Rg_j - I) v + t_j); equal to sum_j w_j (Rg_j v + t_j)
    # since the weights sum to one, and exact for the identity pose.
    blend = np.einsum("vj,jab->vab", W, rg - eye)
    verts = v_posed + np.einsum("vab,vb->va", blend, v_posed) + W @ t
    return PosedBody(vertices=verts, joints=joints,
                     keypoints_3d=_gather_keypoints(model, verts, joints))


def _gather_keypoints(model, verts, joints):
    if not model.keypoint_map:
        return np.zeros((0, 3))
    out = np.empty(joints.shape[:-2] + (model.num_keypoints, 3))
    for i, kp in enumerate(model.keypoint_map):
        src = joints if kp.kind == "joint" else verts
        out[..., i, :] = src[..., kp.index, :]
    return out


def t_pose_vertices(model: BodyModel, beta):
    return pose(model, np.zeros(3 * model.num_joints), beta).vertices


def pose_joints_batch(model: BodyModel, thetas, betas):
    """Posed joints and keypoints for a batch, skipping the vertex skinning
    unless a keypoint is vertex-based.

    thetas: (B, 72); betas: (B, 10).  Returns (joints (B,J,3), keypoints (B,N_J,3)).
    """
    thetas = np.asarray(thetas, dtype=float).reshape(-1, model.num_joints, 3)
    betas = np.asarray(betas, dtype=float).reshape(-1, model.num_betas)
    jreg_template = model.joint_regressor @ model.template_vertices
    jreg_dirs = np.einsum("jv,vcb->jcb", model.joint_regressor, model.shape_dirs)
    rest = jreg_template + np.einsum("jcb,nb->njc", jreg_dirs, betas)
    rots = axis_angle_to_matrix(thetas)
    _, joints, _ = forward_kinematics(rots, rest, model.kinematic_parents)
    if any(kp.kind == "vertex" for kp in model.keypoint_map):
        kps = np.stack([pose(model, th, be).keypoints_3d for th, be in zip(thetas, betas)])
    else:
        kps = joints[:, [kp.index for kp in model.keypoint_map], :]
    return joints, kps


def pose_vertices_batch(model: BodyModel, thetas, betas):
    return np.stack([pose(model, th, be).vertices
                     for th, be in zip(np.asarray(thetas), np.asarray(betas))])


# --------------------------------------------------------------------------
# regions


def compute_regions(model: BodyModel, part_labels=None):
    """Axial-band vertex sets on the template.

    abdomen: hips -> lower ribs (spine2), thorax: lower ribs -> shoulders,
    head: at or above the neck joint.  Only trunk/head vertices qualify;
    without explicit part labels, a vertex counts as trunk when its dominant
    skinning joint lies on the spine/head chain.
    """
    joints = model.joint_regressor @ model.template_vertices
    y = model.template_vertices[:, 1]
    hip_y = 0.5 * (joints[1, 1] + joints[2, 1])
    ribs_y = joints[6, 1]
    shoulder_y = 0.5 * (joints[16, 1] + joints[17, 1])
    neck_y = joints[12, 1]
    if part_labels is None:
        dominant = np.argmax(model.skin_weights, axis=1)
        trunk = np.isin(dominant, [0, 3, 6, 9, 13, 14])
        headish = np.isin(dominant, [12, 15])
    else:
        part_labels = np.asarray(part_labels)
        trunk = part_labels == "torso"
        headish = np.isin(part_labels, ["neck", "head"])
    return {
        "abdomen": np.flatnonzero(trunk & (y >= hip_y) & (y < ribs_y)),
        "thorax": np.flatnonzero(trunk & (y >= ribs_y) & (y < shoulder_y)),
        "head": np.flatnonzero(headish & (y >= neck_y)),
    }


# --------------------------------------------------------------------------
# MiniBody construction

# T-pose joint layout, pelvis at the origin, +y up, +z anterior, +x subject's left.
_MINI_JOINTS = np.array([
    [0.00, 0.00, 0.00],     # pelvis
    [0.08, -0.09, 0.00],    # l_hip
    [-0.08, -0.09, 0.00],   # r_hip
    [0.00, 0.10, -0.01],    # spine1
    [0.10, -0.48, 0.01],    # l_knee
    [-0.10, -0.48, 0.01],   # r_knee
    [0.00, 0.24, -0.01],    # spine2
    [0.09, -0.89, -0.03],   # l_ankle
    [-0.09, -0.89, -0.03],  # r_ankle
    [0.00, 0.30, 0.00],     # spine3
    [0.10, -0.94, 0.10],    # l_foot
    [-0.10, -0.94, 0.10],   # r_foot
    [0.00, 0.50, -0.02],    # neck
    [0.07, 0.42, -0.01],    # l_collar
    [-0.07, 0.42, -0.01],   # r_collar
    [0.00, 0.60, 0.02],     # head
    [0.17, 0.44, -0.01],    # l_shoulder
    [-0.17, 0.44, -0.01],   # r_shoulder
    [0.43, 0.44, -0.02],    # l_elbow
    [-0.43, 0.44, -0.02],   # r_elbow
    [0.68, 0.44, -0.01],    # l_wrist
    [-0.68, 0.44, -0.01],   # r_wrist
    [0.76, 0.44, -0.01],    # l_hand
    [-0.76, 0.44, -0.01],   # r_hand
])

# (part label, start, end, lateral radius, depth radius, n_around, body rings, cap rings)
_MINI_PARTS = [
    ("torso", (0.0, -0.05, 0.0), (0.0, 0.40, 0.0), 0.155, 0.11, 16, 8, 3),
    ("neck", (0.0, 0.47, -0.01), (0.0, 0.60, 0.0), 0.055, 0.055, 8, 2, 1),
    ("head", (0.0, 0.70, 0.02), (0.0, 0.70, 0.02), 0.10, 0.10, 12, 0, 3),
]
for _side, _s in (("l", 1.0), ("r", -1.0)):
    _MINI_PARTS += [
        ("upper_arm", (0.17 * _s, 0.44, -0.01), (0.43 * _s, 0.44, -0.02), 0.048, 0.048, 8, 3, 1),
        ("forearm", (0.43 * _s, 0.44, -0.02), (0.68 * _s, 0.44, -0.01), 0.038, 0.038, 8, 3, 1),
        ("hand", (0.69 * _s, 0.44, -0.01), (0.82 * _s, 0.44, -0.01), 0.03, 0.022, 8, 2, 1),
        ("thigh", (0.08 * _s, -0.09, 0.0), (0.10 * _s, -0.48, 0.01), 0.075, 0.075, 10, 4, 1),
        ("shin", (0.10 * _s, -0.48, 0.01), (0.09 * _s, -0.89, -0.03), 0.05, 0.05, 8, 4, 1),
        ("foot", (0.09 * _s, -0.92, -0.04), (0.10 * _s, -0.94, 0.12), 0.04, 0.03, 8, 2, 1),
    ]


def _capsule(a, b, r_lat, r_depth, n_around, n_body, n_cap, phase):
    """Closed capsule surface between a and b with elliptic cross-section."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    axis = b - a
    length = np.linalg.norm(axis)
    d = axis / length if length > 0 else np.array([0.0, 1.0, 0.0])
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    w = ref - ref.dot(d) * d
    w /= np.linalg.norm(w)
    u = np.cross(d, w)
    cap_r = min(r_lat, r_depth)

    # ring stations: (axial offset from a, radial scale)
    stations = []
    for i in range(n_cap, 0, -1):
        ang = 0.5 * np.pi * i / (n_cap + 1)
        stations.append((-cap_r * np.sin(ang), np.cos(ang)))
    for i in range(n_body):
        stations.append((length * i / max(n_body - 1, 1), 1.0))
    if n_body == 0:
        stations.append((0.0, 1.0))
    for i in range(1, n_cap + 1):
        ang = 0.5 * np.pi * i / (n_cap + 1)
        stations.append((length + cap_r * np.sin(ang), np.cos(ang)))

    phis = 2 * np.pi * (np.arange(n_around) + phase) / n_around
    verts = [a - cap_r * d]
    for off, scale in stations:
        for phi in phis:
            verts.append(a + off * d + scale * (r_lat * np.cos(phi) * u + r_depth * np.sin(phi) * w))
    verts.append(a + (length + cap_r) * d)
    verts = np.array(verts)

    faces = []
    n_st = len(stations)
    ring = lambda s, k: 1 + s * n_around + (k % n_around)
    for k in range(n_around):
        faces.append((0, ring(0, k + 1), ring(0, k)))
    for s in range(n_st - 1):
        for k in range(n_around):
            faces.append((ring(s, k), ring(s, k + 1), ring(s + 1, k + 1)))
            faces.append((ring(s, k), ring(s + 1, k + 1), ring(s + 1, k)))
    top = len(verts) - 1
    for k in range(n_around):
        faces.append((top, ring(n_st - 1, k), ring(n_st - 1, k + 1)))
    return verts, np.array(faces)


def _segment_distance(p, a, b):
    ab = b - a
    denom = max(ab.dot(ab), 1e-12)
    s = np.clip((p - a) @ ab / denom, 0.0, 1.0)
    closest = a + s[:, None] * ab
    return np.linalg.norm(p - closest, axis=1)


def _mini_bones(joints, parents):
    bones = [(parents[c], joints[parents[c]], joints[c]) for c in range(1, len(parents))]
    bones.append((15, joints[15], joints[15] + np.array([0.0, 0.20, 0.0])))
    bones.append((22, joints[22], joints[22] + np.array([0.06, 0.0, 0.0])))
    bones.append((23, joints[23], joints[23] + np.array([-0.06, 0.0, 0.0])))
    return bones


def _mini_shape_dirs(verts, parts, rng):
    x, y, z = verts[:, 0], verts[:, 1], verts[:, 2]
    V = len(verts)
    dirs = np.zeros((V, 3, NUM_BETAS))
    not_head = ~np.isin(parts, ["head"])
    torso = parts == "torso"

    # 0: overall stature, 5% per unit about the pelvis
    dirs[:, :, 0] = 0.05 * verts
    # 1: girth; lateral + depth spread about the midline, arms shift rigidly
    dirs[:, 0, 1] = 0.07 * np.clip(x, -0.17, 0.17) * not_head
    dirs[:, 2, 1] = 0.07 * z * not_head
    # 2: leg length
    dirs[:, 1, 2] = 0.04 * np.minimum(y + 0.09, 0.0)
    # 3: arm length
    arm = np.abs(x) > 0.17
    dirs[:, 0, 3] = 0.04 * np.where(arm, x - np.sign(x) * 0.17, 0.0)
    # 4: trunk length (everything above the pelvis moves up)
    dirs[:, 1, 4] = 0.03 * np.clip(y, 0.0, 0.47)
    # 5: belly depth, anterior abdomen only
    bump = np.exp(-((y - 0.08) / 0.12) ** 2)
    dirs[:, 2, 5] = 0.04 * np.maximum(z, 0.0) * bump * torso
    # 6: shoulder breadth
    dirs[:, 0, 6] = 0.02 * np.sign(x) * np.clip((np.abs(x) - 0.05) / 0.12, 0.0, 1.0) * (y > 0.3)
    # 7-9: seeded low-order smooth fields, ~3 mm per unit
    basis = np.stack([x, y, z, x * y, y * z, x * z, y * y, x * x], axis=1)
    for k in range(7, NUM_BETAS):
        coef = rng.normal(size=(basis.shape[1], 3))
        field_ = basis @ coef
        field_ *= 0.003 / max(np.abs(field_).max(), 1e-12)
        dirs[:, :, k] = field_
    return dirs


def make_mini_model(seed: int = 7, keypoints=None) -> BodyModel:
    """Build the procedural MiniBody.

    Deterministic in ``seed`` (ring phase jitter and the three smooth shape
    fields depend on it).  ``keypoints`` selects the evaluation keypoints by
    joint name; the default is the 12 limb joints.
    """
    rng = np.random.default_rng(seed)
    parents = np.array(SMPL_PARENTS)
    verts, faces, parts = [], [], []
    offset = 0
    for label, a, b, r_lat, r_dep, n_around, n_body, n_cap in _MINI_PARTS:
        v, f = _capsule(a, b, r_lat, r_dep, n_around, n_body, n_cap, phase=rng.uniform(0, 0.5))
        verts.append(v)
        faces.append(f + offset)
        parts += [label] * len(v)
        offset += len(v)
    verts = np.concatenate(verts)
    faces = np.concatenate(faces)
    parts = np.array(parts)

    # skinning: inverse distance to the two nearest bones
    bones = _mini_bones(_MINI_JOINTS, parents)
    dist = np.stack([_segment_distance(verts, a, b) for _, a, b in bones], axis=1)
    drivers = np.array([j for j, _, _ in bones])
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :2]
    skin = np.zeros((len(verts), NUM_JOINTS))
    rows = np.arange(len(verts))
    for c in range(2):
        d = dist[rows, nearest[:, c]]
        np.add.at(skin, (rows, drivers[nearest[:, c]]), 1.0 / (d + 1e-4))
    skin /= skin.sum(axis=1, keepdims=True)

    # joint regressor: nonnegative weights over the nearest vertices that
    # reproduce the designed joint, pulled toward inverse-distance weights;
    # the neighborhood grows until the joint lies inside its hull
    jreg = np.zeros((NUM_JOINTS, len(verts)))
    for j, p in enumerate(_MINI_JOINTS):
        d = np.linalg.norm(verts - p, axis=1)
        order = np.argsort(d, kind="stable")
        for k in (16, 32, 64, 128):
            idx = order[:k]
            prior = 1.0 / (d[idx] + 1e-3)
            prior /= prior.sum()
            big, lam = 1e3, 1e-2
            A = np.vstack([big * verts[idx].T, big * np.ones((1, k)), lam * np.eye(k)])
            rhs = np.concatenate([big * p, [big], lam * prior])
            w = lsq_linear(A, rhs, bounds=(0.0, np.inf)).x
            w /= w.sum()
            if np.linalg.norm(w @ verts[idx] - p) < 1e-4:
                break
        jreg[j, idx] = w

    names = keypoints or [name for name, _ in LIMB_KEYPOINTS]
    kmap = tuple(Keypoint(n, JOINT_NAMES.index(n), "joint") for n in names)

    model = _build(
        template_vertices=verts,
        faces=faces,
        shape_dirs=_mini_shape_dirs(verts, parts, rng),
        pose_dirs=np.zeros((len(verts), 3, 9 * (NUM_JOINTS - 1))),
        joint_regressor=jreg,
        skin_weights=skin,
        kinematic_parents=parents,
        keypoint_map=kmap,
    )
    regions = compute_regions(model, part_labels=parts)
    return _build(**{**_fields(model), "regions": regions})


def _fields(model):
    return {name: getattr(model, name) for name in model.__dataclass_fields__}


def with_pose_dirs(model: BodyModel, pose_dirs) -> BodyModel:
    return _build(**{**_fields(model), "pose_dirs": pose_dirs})


def with_keypoints(model: BodyModel, keypoints) -> BodyModel:
    kmap = tuple(k if isinstance(k, Keypoint) else Keypoint(*k) for k in keypoints)
    return _build(**{**_fields(model), "keypoint_map": kmap})


# --------------------------------------------------------------------------
# model-parameter file


def save_model(model: BodyModel, path):
    V, J = model.num_vertices, model.num_joints
    doc = {
        "version": FORMAT_VERSION,
        "dims": {"V": V, "F": int(model.faces.shape[0]), "J": J,
                 "num_betas": model.num_betas, "num_pose_basis": 9 * (J - 1),
                 "num_keypoints": model.num_keypoints},
        "template_vertices": model.template_vertices.ravel().tolist(),
        "faces": model.faces.ravel().tolist(),
        "shape_dirs": model.shape_dirs.ravel().tolist(),
        "pose_dirs": model.pose_dirs.ravel().tolist(),
        "joint_regressor": model.joint_regressor.ravel().tolist(),
        "skin_weights": model.skin_weights.ravel().tolist(),
        "kinematic_parents": model.kinematic_parents.tolist(),
        "keypoint_map": [{"name": k.name, k.kind: k.index} for k in model.keypoint_map],
        "regions": {k: v.tolist() for k, v in model.regions.items()},
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_model(path) -> BodyModel:
    """Load and validate a model-parameter file.

    Raises FileNotFoundError, DataFormatError for unparsable content, and
    InvariantError (a DataFormatError) naming the offending field.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"{path}: not a valid model document ({exc})") from exc
    if not isinstance(doc, dict):
        raise DataFormatError(f"{path}: top level must be an object")
    if doc.get("version") != FORMAT_VERSION:
        raise InvariantError("version", f"unsupported version {doc.get('version')!r}")
    dims = doc.get("dims")
    if not isinstance(dims, dict):
        raise InvariantError("dims", "missing dims header")
    try:
        V, F, J = int(dims["V"]), int(dims["F"]), int(dims["J"])
        nb = int(dims.get("num_betas", NUM_BETAS))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvariantError("dims", f"incomplete dims header ({exc})") from exc

    def arr(key, shape, dtype=float):
        if key not in doc:
            raise InvariantError(key, "missing")
        try:
            a = np.asarray(doc[key], dtype=dtype)
        except (TypeError, ValueError) as exc:
            raise InvariantError(key, f"not a numeric array ({exc})") from exc
        if a.ndim != 1 or a.size != int(np.prod(shape)):
            raise InvariantError(key, f"expected {int(np.prod(shape))} values for shape {shape}, got {a.size}")
        return a.reshape(shape)

    kmap = []
    for entry in doc.get("keypoint_map", []):
        try:
            kind = "joint" if "joint" in entry else "vertex"
            kmap.append(Keypoint(str(entry["name"]), int(entry[kind]), kind))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvariantError("keypoint_map", f"bad entry {entry!r}") from exc

    return _build(
        template_vertices=arr("template_vertices", (V, 3)),
        faces=arr("faces", (F, 3), np.int64),
        shape_dirs=arr("shape_dirs", (V, 3, nb)),
        pose_dirs=arr("pose_dirs", (V, 3, 9 * (J - 1))),
        joint_regressor=arr("joint_regressor", (J, V)),
        skin_weights=arr("skin_weights", (V, J)),
        kinematic_parents=arr("kinematic_parents", (J,), np.int64),
        keypoint_map=tuple(kmap),
        regions={k: np.asarray(v, dtype=np.int64) for k, v in doc.get("regions", {}).items()},
    )


def model_digest(model: BodyModel) -> str:
    """Short content hash, used for lineage in manifests and checkpoints."""
    import hashlib

    h = hashlib.sha256()
    for name in ("template_vertices", "faces", "shape_dirs", "pose_dirs",
                 "joint_regressor", "skin_weights", "kinematic_parents"):
        h.update(np.ascontiguousarray(getattr(model, name)).tobytes())
    h.update(repr([(k.name, k.index, k.kind) for k in model.keypoint_map]).encode())
    return h.hexdigest()[:16]
