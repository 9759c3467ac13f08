"""Synthetic (pose, shape, camera) -> heatmap training pairs and their shard files.

Every record is generated from its own seed derived from (dataset seed,
record id), so the dataset content does not depend on how records are split
across worker processes.
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .body_model import BodyModel, model_digest, pose_joints_batch
from .camera import (CameraExtrinsics, CameraIntrinsics, CameraSamplingConfig, project,
                     sample_camera)
from .errors import (ConfigError, DataFormatError, ShardFormatError,
                     VisibilityRejectionError)
from .heatmap import HeatmapStack, KeypointSet, render_grids

NUM_THETA = 72
MAX_ATTEMPTS = 100
SUPINE_ROOT = np.array([-np.pi / 2, 0.0, 0.0])

MAGIC = b"SPMK"
SHARD_VERSION = 1
# magic, version, N_J, H, W, stride, sigma, origin x, origin y, heatmap dtype (0=f16, 1=f32)
_HEADER = struct.Struct("<4sHHHHffffB")
_LEN = struct.Struct("<I")
_ID = struct.Struct("<Q")
F16_TINY = 2.0 ** -14
_DTYPES = {"f16": (0, np.dtype("<f2")), "f32": (1, np.dtype("<f4"))}


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class HeatmapParams:
    """Grid geometry.  The default 64x64 grid with stride 10 spans the whole
    640x480 image (rows start 80 px above the top edge)."""

    resolution: tuple = (64, 64)
    stride: float = 10.0
    sigma: float = 20.0
    origin: tuple = (0.0, -80.0)

    def __post_init__(self):
        if self.sigma <= 0 or self.stride <= 0:
            raise ConfigError("heatmap sigma and stride must be positive")
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))


@dataclass(frozen=True)
class GenConfig:
    count: int = 20000
    beta_std: float = 1.0
    camera: CameraSamplingConfig = field(default_factory=lambda: DEFAULT_CAMERA)
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    heatmap: HeatmapParams = field(default_factory=HeatmapParams)
    pose_noise: float = 0.05  # radians, per component
    seed: int = 7
    heatmap_dtype: str = "f16"
    shard_size: int = 1000
    workers: int = 1
    min_visible: int | None = None  # default: half the keypoints

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if not self.beta_std > 0:
            raise ConfigError(f"beta_std must be > 0, got {self.beta_std}")
        if not self.pose_noise >= 0:
            raise ConfigError(f"pose_noise must be >= 0, got {self.pose_noise}")
        if self.heatmap_dtype not in _DTYPES:
            raise ConfigError(f"heatmap_dtype must be one of {sorted(_DTYPES)}")
        if self.shard_size < 1 or self.workers < 1:
            raise ConfigError("shard_size and workers must be >= 1")

    def visibility_threshold(self, n_keypoints):
        return (n_keypoints + 1) // 2 if self.min_visible is None else self.min_visible

    def content_dict(self):
        """Fields that determine dataset content (not worker count)."""
        d = asdict(self)
        d.pop("workers")
        return d


DEFAULT_CAMERA = CameraSamplingConfig()


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o)}")


# --------------------------------------------------------------------------
# pose bank


@dataclass(frozen=True, eq=False)
class PoseBank:
    poses: np.ndarray  # (P, 72)
    source: str
    weights: np.ndarray | None = None

    def __post_init__(self):
        poses = np.asarray(self.poses, float)
        if poses.ndim != 2 or poses.shape[0] == 0 or poses.shape[1] != NUM_THETA:
            raise DataFormatError(f"pose bank must be a nonempty (P, {NUM_THETA}) array")
        if not np.all(np.isfinite(poses)):
            raise DataFormatError("pose bank contains non-finite values")
        object.__setattr__(self, "poses", poses)
        if self.weights is not None:
            w = np.asarray(self.weights, float)
            if w.shape != (poses.shape[0],) or np.any(w < 0) or w.sum() <= 0:
                raise DataFormatError("pose weights must be nonnegative, one per pose")
            object.__setattr__(self, "weights", w / w.sum())

    def __len__(self):
        return self.poses.shape[0]

    def digest(self):
        return hashlib.sha256(self.poses.tobytes()).hexdigest()[:16]


# Per-joint perturbation limits (radians) about local x, y, z, added to the
# supine base pose.  Entries are (low, high) per axis.
_Z = (0.0, 0.0)
ANATOMICAL_LIMITS = {
    0: [(-0.08, 0.08), (-0.15, 0.15), (-0.08, 0.08)],  # pelvis (roll about the long axis via y)
    1: [(-0.5, 0.1), (-0.3, 0.3), (-0.05, 0.3)],  # l_hip: flexion -x, abduction +z
    2: [(-0.5, 0.1), (-0.3, 0.3), (-0.3, 0.05)],  # r_hip
    3: [(-0.1, 0.1), (-0.08, 0.08), (-0.08, 0.08)],
    4: [(0.0, 0.9), _Z, _Z],  # l_knee flexion
    5: [(0.0, 0.9), _Z, _Z],
    6: [(-0.08, 0.08), (-0.08, 0.08), (-0.08, 0.08)],
    7: [(-0.3, 0.3), (-0.15, 0.15), (-0.15, 0.15)],
    8: [(-0.3, 0.3), (-0.15, 0.15), (-0.15, 0.15)],
    9: [(-0.08, 0.08), (-0.08, 0.08), (-0.08, 0.08)],
    10: [_Z, _Z, _Z],
    11: [_Z, _Z, _Z],
    12: [(-0.15, 0.15), (-0.2, 0.2), (-0.1, 0.1)],
    13: [(-0.1, 0.1), (-0.1, 0.1), (-0.1, 0.1)],
    14: [(-0.1, 0.1), (-0.1, 0.1), (-0.1, 0.1)],
    15: [(-0.15, 0.15), (-0.3, 0.3), (-0.1, 0.1)],
    16: [(-0.4, 0.4), (-0.3, 0.3), (-0.4, 0.45)],  # l_shoulder, about the arms-down base
    17: [(-0.4, 0.4), (-0.3, 0.3), (-0.45, 0.4)],
    18: [(-0.2, 0.2), (-1.4, 0.0), _Z],  # l_elbow flexion -y
    19: [(-0.2, 0.2), (0.0, 1.4), _Z],
    20: [(-0.3, 0.3), (-0.2, 0.2), (-0.3, 0.3)],
    21: [(-0.3, 0.3), (-0.2, 0.2), (-0.3, 0.3)],
    22: [_Z, _Z, _Z],
    23: [_Z, _Z, _Z],
}
ARMS_DOWN = np.deg2rad(70.0)


def supine_base_pose():
    theta = np.zeros((24, 3))
    theta[0] = SUPINE_ROOT
    theta[16, 2] = -ARMS_DOWN
    theta[17, 2] = ARMS_DOWN
    return theta.reshape(-1)


def _compose_root(base, delta):
    r = Rotation.from_rotvec(base) * Rotation.from_rotvec(delta)
    return r.as_rotvec()


def procedural_poses(n, seed, model: BodyModel | None = None, table_margin=0.02):
    """Supine poses with per-joint uniform perturbations inside
    ANATOMICAL_LIMITS.  With a model, poses whose joints sink more than
    ``table_margin`` below the base pose's lowest joint are redrawn."""
    rng = np.random.default_rng(seed)
    base = supine_base_pose().reshape(24, 3)
    lo = np.array([[a[0] for a in ANATOMICAL_LIMITS[j]] for j in range(24)])
    hi = np.array([[a[1] for a in ANATOMICAL_LIMITS[j]] for j in range(24)])
    floor = None
    if model is not None:
        j0, _ = pose_joints_batch(model, base.reshape(1, -1), np.zeros((1, model.num_betas)))
        floor = j0[0, :, 1].min() - table_margin
    out = []
    while len(out) < n:
        m = max(2 * (n - len(out)), 16)
        delta = rng.uniform(lo, hi, size=(m, 24, 3))
        theta = base + delta
        theta[:, 0] = [_compose_root(base[0], d) for d in delta[:, 0]]
        theta = theta.reshape(m, -1)
        if floor is not None:
            joints, _ = pose_joints_batch(model, theta, np.zeros((m, model.num_betas)))
            theta = theta[joints[..., 1].min(axis=1) >= floor]
        out.extend(theta)
    return np.array(out[:n])


def load_pose_file(path) -> np.ndarray:
    """One pose per line: 72 numbers separated by whitespace or commas.
    Blank lines and lines starting with '#' are skipped."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"pose file not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.replace(",", " ").split()
        try:
            values = [float(p) for p in parts]
        except ValueError as exc:
            raise DataFormatError(f"{path}: row {lineno}: {exc}") from exc
        if len(values) != NUM_THETA:
            raise DataFormatError(
                f"{path}: row {lineno}: expected {NUM_THETA} values, got {len(values)}")
        rows.append(values)
    if not rows:
        raise DataFormatError(f"{path}: no poses found")
    return np.array(rows)


def save_pose_file(poses, path):
    np.savetxt(path, np.asarray(poses).reshape(-1, NUM_THETA), fmt="%.9g")


def build_pose_bank(source="procedural", seed=0, n=2000, model=None) -> PoseBank:
    """``source`` is "procedural" or a path to a pose file."""
    if source == "procedural":
        if n < 1:
            raise ConfigError("procedural pose bank needs n >= 1")
        return PoseBank(procedural_poses(n, seed, model), f"procedural:n={n}:seed={seed}")
    poses = load_pose_file(source)
    return PoseBank(poses, f"file:{source}")


# --------------------------------------------------------------------------
# pair sampling


@dataclass(frozen=True, eq=False)
class TrainingPair:
    record_id: int
    theta: np.ndarray  # (72,)
    beta: np.ndarray  # (10,)
    extrinsics: CameraExtrinsics
    keypoints_2d: KeypointSet
    heatmaps: HeatmapStack


def record_rng(seed, record_id):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(record_id)]))


def project_keypoints(model, theta, beta, extr, intr):
    _, kps = pose_joints_batch(model, np.reshape(theta, (1, -1)), np.reshape(beta, (1, -1)))
    uv, vis = project(kps[0], intr, extr)
    return np.where(np.isfinite(uv), uv, 0.0), vis


def sample_pair(model: BodyModel, bank: PoseBank, cfg: GenConfig, rng, record_id=0) -> TrainingPair:
    """Draw (theta, beta, camera), resampling until enough keypoints are visible."""
    need = cfg.visibility_threshold(model.num_keypoints)
    hp = cfg.heatmap
    for _ in range(MAX_ATTEMPTS):
        k = rng.choice(len(bank), p=bank.weights) if bank.weights is not None else rng.integers(len(bank))
        theta = bank.poses[k] + cfg.pose_noise * rng.standard_normal(NUM_THETA)
        beta = cfg.beta_std * rng.standard_normal(model.num_betas)
        extr = sample_camera(cfg.camera, rng)
        uv, vis = project_keypoints(model, theta, beta, extr, cfg.intrinsics)
        if vis.sum() >= need:
            grids = render_grids(uv, vis, hp.resolution, hp.stride, hp.sigma, hp.origin)
            return TrainingPair(int(record_id), theta, beta, extr,
                                KeypointSet(uv, vis.astype(float), vis),
                                HeatmapStack(grids, hp.stride, hp.origin))
    raise VisibilityRejectionError(
        f"record {record_id}: fewer than {need} visible keypoints after {MAX_ATTEMPTS} attempts",
        [record_id])


# --------------------------------------------------------------------------
# shard format


def _record_size(n_kp, H, W, dtype):
    floats = NUM_THETA + 10 + 12 + 3 * n_kp
    return _ID.size + 4 * floats + np.dtype(dtype).itemsize * n_kp * H * W


def encode_header(n_kp, hp: HeatmapParams, dtype="f16"):
    flag = _DTYPES[dtype][0]
    H, W = hp.resolution
    return _HEADER.pack(MAGIC, SHARD_VERSION, n_kp, H, W, hp.stride, hp.sigma,
                        hp.origin[0], hp.origin[1], flag)


def encode_record(pair: TrainingPair, dtype="f16"):
    kp = pair.keypoints_2d
    floats = np.concatenate([pair.theta, pair.beta, pair.extrinsics.as_array(),
                             np.column_stack([kp.coords, kp.visibility]).ravel()]).astype("<f4")
    grids = pair.heatmaps.grids.astype(np.float32)
    if dtype == "f16":
        # below the smallest normal half; also avoids the slow subnormal cast
        grids[grids < F16_TINY] = 0.0
    body = _ID.pack(pair.record_id) + floats.tobytes() + grids.astype(_DTYPES[dtype][1]).tobytes()
    return _LEN.pack(len(body)) + body


def write_shard(path, pairs, n_kp, hp: HeatmapParams, dtype="f16"):
    with open(path, "wb") as fh:
        fh.write(encode_header(n_kp, hp, dtype))
        for p in pairs:
            fh.write(encode_record(p, dtype))


@dataclass(frozen=True)
class ShardHeader:
    n_keypoints: int
    resolution: tuple
    stride: float
    sigma: float
    origin: tuple
    dtype: str

    def heatmap_params(self):
        return HeatmapParams(self.resolution, self.stride, self.sigma, self.origin)


@dataclass(eq=False)
class ShardData:
    header: ShardHeader
    ids: np.ndarray
    theta: np.ndarray
    beta: np.ndarray
    extrinsics: np.ndarray  # (n, 12)
    keypoints: np.ndarray  # (n, N_J, 3): u, v, vis
    heatmaps: np.ndarray  # (n, N_J, H, W) as stored, or transformed
    offsets: np.ndarray  # byte offset of each record's length prefix


def read_header(buf, path):
    if len(buf) < _HEADER.size:
        raise ShardFormatError(path, 0, "truncated header")
    magic, version, nj, H, W, stride, sigma, ox, oy, flag = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ShardFormatError(path, 0, f"bad magic {magic!r}")
    if version != SHARD_VERSION:
        raise ShardFormatError(path, 4, f"unsupported version {version}")
    names = {v[0]: k for k, v in _DTYPES.items()}
    if flag not in names:
        raise ShardFormatError(path, _HEADER.size - 1, f"unknown heatmap dtype flag {flag}")
    return ShardHeader(nj, (H, W), float(stride), float(sigma), (float(ox), float(oy)), names[flag])


def read_shard(path, heatmap_transform=None, model: BodyModel | None = None,
               intr: CameraIntrinsics | None = None, kp_tol=1e-2, hm_tol=2e-3) -> ShardData:
    """Parse a shard file.

    ``heatmap_transform`` maps each stored (N_J, H, W) stack (as float32) to
    whatever the caller keeps, e.g. a pooled copy.  With ``model`` and
    ``intr`` every record is re-validated: keypoints are re-derived from the
    stored parameters and heatmaps re-rendered from the stored keypoints,
    compared at storage precision.
    """
    path = Path(path)
    buf = path.read_bytes()
    hdr = read_header(buf, path)
    H, W = hdr.resolution
    hm_dtype = _DTYPES[hdr.dtype][1]
    size = _record_size(hdr.n_keypoints, H, W, hm_dtype)
    n_floats = NUM_THETA + 10 + 12 + 3 * hdr.n_keypoints
    validate = model is not None and intr is not None
    if validate and hdr.n_keypoints != model.num_keypoints:
        raise ShardFormatError(path, 0, f"header N_J={hdr.n_keypoints}, model has {model.num_keypoints}")
    hp = hdr.heatmap_params()
    ids, floats, maps, offsets = [], [], [], []
    pos = _HEADER.size
    while pos < len(buf):
        if pos + _LEN.size > len(buf):
            raise ShardFormatError(path, pos, "truncated record length prefix")
        (length,) = _LEN.unpack_from(buf, pos)
        if length != size:
            raise ShardFormatError(path, pos, f"record length {length}, expected {size}")
        if pos + _LEN.size + length > len(buf):
            raise ShardFormatError(path, pos, f"truncated record ({len(buf) - pos - _LEN.size} of {length} bytes)")
        start = pos + _LEN.size
        rid = _ID.unpack_from(buf, start)[0]
        f = np.frombuffer(buf, "<f4", n_floats, start + _ID.size)
        if not np.all(np.isfinite(f)):
            raise ShardFormatError(path, pos, f"record {rid}: non-finite values")
        hm = np.frombuffer(buf, hm_dtype, hdr.n_keypoints * H * W, start + _ID.size + 4 * n_floats)
        hm = hm.reshape(hdr.n_keypoints, H, W).astype(np.float32)
        if validate:
            kp = f[NUM_THETA + 22:].astype(float).reshape(-1, 3)
            g = render_grids(kp[:, :2], kp[:, 2] > 0.5, hp.resolution, hp.stride, hp.sigma, hp.origin)
            if not np.abs(g - hm).max() <= hm_tol:
                raise ShardFormatError(path, pos, f"record {rid}: heatmaps inconsistent with stored keypoints")
        ids.append(rid)
        floats.append(f)
        maps.append(hm if heatmap_transform is None else heatmap_transform(hm))
        offsets.append(pos)
        pos = start + length
    floats = np.array(floats, dtype=np.float64).reshape(len(ids), n_floats)
    data = ShardData(
        header=hdr,
        ids=np.array(ids, dtype=np.int64),
        theta=floats[:, :NUM_THETA],
        beta=floats[:, NUM_THETA:NUM_THETA + 10],
        extrinsics=floats[:, NUM_THETA + 10:NUM_THETA + 22],
        keypoints=floats[:, NUM_THETA + 22:].reshape(-1, hdr.n_keypoints, 3),
        heatmaps=np.array(maps) if maps else np.zeros((0,)),
        offsets=np.array(offsets, dtype=np.int64),
    )
    if validate:
        _check_keypoints(path, data, model, intr, kp_tol)
    return data


def _extrinsics_from_f32(values):
    R = np.asarray(values[:9], float).reshape(3, 3)
    U, _, Vt = np.linalg.svd(R)
    return CameraExtrinsics(U @ Vt, values[9:12])


def _check_keypoints(path, data: ShardData, model, intr, kp_tol):
    if len(data.ids) == 0:
        return
    _, kps3d = pose_joints_batch(model, data.theta, data.beta)
    for i in range(len(data.ids)):
        extr = _extrinsics_from_f32(data.extrinsics[i])
        uv, vis = project(kps3d[i], intr, extr)
        uv = np.where(np.isfinite(uv), uv, 0.0)
        stored = data.keypoints[i]
        svis = stored[:, 2] > 0.5
        err = np.abs(uv - stored[:, :2]).max(axis=1)
        # a keypoint within tolerance of the image border may flip visibility
        bad = (vis & svis & (err > kp_tol)) | ((vis != svis) & (err > kp_tol))
        if bad.any():
            raise ShardFormatError(path, int(data.offsets[i]),
                                   f"record {data.ids[i]}: keypoints inconsistent with stored parameters")


# --------------------------------------------------------------------------
# dataset generation

_WORKER_STATE = {}


def _init_worker(model, bank, cfg):
    _WORKER_STATE.update(model=model, bank=bank, cfg=cfg)


def _generate_shard(job):
    index, first, count, path = job
    model, bank, cfg = _WORKER_STATE["model"], _WORKER_STATE["bank"], _WORKER_STATE["cfg"]
    pairs, failed = [], []
    for rid in range(first, first + count):
        try:
            pairs.append(sample_pair(model, bank, cfg, record_rng(cfg.seed, rid), rid))
        except VisibilityRejectionError:
            failed.append(rid)
    if not failed:
        write_shard(path, pairs, model.num_keypoints, cfg.heatmap, cfg.heatmap_dtype)
    return index, failed


def shard_name(index):
    return f"shard-{index:05d}.spmk"


def dataset_hash(model, bank, cfg: GenConfig):
    return config_hash({"gen": cfg.content_dict(), "model": model_digest(model), "bank": bank.digest()})


def generate_dataset(model: BodyModel, bank: PoseBank, cfg: GenConfig, out_path, extra=None) -> dict:
    """Write ``cfg.count`` records as shards of ``cfg.shard_size`` plus
    ``manifest.json``; returns the manifest."""
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for index, first in enumerate(range(0, cfg.count, cfg.shard_size)):
        n = min(cfg.shard_size, cfg.count - first)
        jobs.append((index, first, n, str(out / shard_name(index))))

    if cfg.workers == 1 or len(jobs) == 1:
        _init_worker(model, bank, cfg)
        results = [_generate_shard(j) for j in jobs]
    else:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(cfg.workers, initializer=_init_worker, initargs=(model, bank, cfg)) as pool:
            results = pool.map(_generate_shard, jobs, chunksize=1)

    failed = sorted(rid for _, f in results for rid in f)
    if failed:
        raise VisibilityRejectionError(
            f"{len(failed)} record(s) exhausted {MAX_ATTEMPTS} visibility attempts "
            f"(check camera ranges): ids {failed[:20]}{' ...' if len(failed) > 20 else ''}", failed)

    manifest = {
        "format": "patientmesh-dataset",
        "version": 1,
        "shards": [{"file": Path(p).name, "count": n, "first_id": first} for _, first, n, p in jobs],
        "total": cfg.count,
        "seed": cfg.seed,
        "config_hash": dataset_hash(model, bank, cfg),
        "model_digest": model_digest(model),
        "pose_bank": {"source": bank.source, "digest": bank.digest(), "size": len(bank)},
        "visibility_threshold": cfg.visibility_threshold(model.num_keypoints),
        "heatmap": asdict(cfg.heatmap) | {"dtype": cfg.heatmap_dtype},
        "intrinsics": asdict(cfg.intrinsics),
        "n_keypoints": model.num_keypoints,
        "keypoint_names": model.keypoint_names,
        "config": cfg.content_dict(),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_jsonable), encoding="utf-8")
    return manifest


def read_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        doc["shards"], doc["total"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataFormatError(f"{path}: malformed manifest ({exc})") from exc
    return path.parent, doc


def load_dataset(path, model: BodyModel | None = None, heatmap_transform=None, validate=True,
                 limit=None) -> ShardData:
    """Read all shards listed in a manifest, in id order, into one ShardData.

    With ``validate`` (and a model), every record's keypoints and heatmaps are
    re-derived and compared against its stored parameters.
    """
    root, doc = read_manifest(path)
    if model is not None and doc.get("model_digest") not in (None, model_digest(model)):
        raise DataFormatError(f"{root}: dataset was generated with a different body model")
    intr = CameraIntrinsics(**doc["intrinsics"])
    parts = []
    total = 0
    for entry in doc["shards"]:
        spath = root / entry["file"]
        if not spath.is_file():
            raise FileNotFoundError(f"shard listed in manifest is missing: {spath}")
        data = read_shard(spath, heatmap_transform, model if validate else None, intr)
        if len(data.ids) != entry["count"]:
            raise ShardFormatError(spath, int(spath.stat().st_size),
                                   f"{len(data.ids)} records, manifest says {entry['count']}")
        expected = np.arange(entry["first_id"], entry["first_id"] + entry["count"])
        if not np.array_equal(data.ids, expected):
            k = int(np.argmax(data.ids != expected))
            raise ShardFormatError(spath, int(data.offsets[k]), f"unexpected record id {data.ids[k]}")
        parts.append(data)
        total += len(data.ids)
        if limit is not None and total >= limit:
            break
    if not parts:
        raise DataFormatError(f"{root}: dataset is empty")
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    out = ShardData(parts[0].header, cat("ids"), cat("theta"), cat("beta"), cat("extrinsics"),
                    cat("keypoints"), cat("heatmaps"), cat("offsets"))
    if limit is not None:
        for name in ("ids", "theta", "beta", "extrinsics", "keypoints", "heatmaps", "offsets"):
            setattr(out, name, getattr(out, name)[:limit])
    return out


def concatenated_bytes(path):
    """All shard bytes in id order (for determinism comparisons)."""
    root, doc = read_manifest(path)
    return b"".join((root / e["file"]).read_bytes()
                    for e in sorted(doc["shards"], key=lambda e: e["first_id"]))


def dataset_digest(path, chunk=1 << 22):
    """SHA-256 of ``concatenated_bytes(path)``, streamed shard by shard."""
    root, doc = read_manifest(path)
    h = hashlib.sha256()
    for e in sorted(doc["shards"], key=lambda e: e["first_id"]):
        with open(root / e["file"], "rb") as f:
            while block := f.read(chunk):
                h.update(block)
    return h.hexdigest()
