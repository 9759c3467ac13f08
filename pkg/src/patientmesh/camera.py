"""Pinhole projection and camera-translation sampling."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MIN_DEPTH = 1e-6

# World frame: +y is the table normal (toward the ceiling), the patient lies
# along z.  The canonical overhead camera looks down -y with image x along
# world +z and image y along world -x.
OVERHEAD_ROTATION = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CameraExtrinsics:
    """World -> camera: x_cam = rotation @ x_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def to_camera(self, points):
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def as_array(self):
        """12 values: row-major rotation then translation."""
        return np.concatenate([self.rotation.ravel(), self.translation])

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=float)
        return cls(values[:9].reshape(3, 3), values[9:12])


@dataclass(frozen=True)
class CameraSamplingConfig:
    """Uniform ranges (meters) for the world->camera translation.

    Defaults put the camera 2.0-2.2 m above the pelvis of a supine body and
    keep the whole MiniBody mesh in a 640x480 frame for >99% of samples
    (tx is offset because the head end of the body is shorter than the
    feet end, measured from the pelvis).
    """

    tx: tuple = (-0.20, 0.0)
    ty: tuple = (-0.20, 0.20)
    tz: tuple = (2.0, 2.2)
    fixed_rotation: bool = True
    roll_deg: float = 10.0  # in-plane roll range when rotation is not fixed
    seed: int = 0

    def __post_init__(self):
        for name in ("tx", "ty", "tz"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"camera.{name}: empty range ({lo} > {hi})")
            object.__setattr__(self, name, (float(lo), float(hi)))


def project(points, intr: CameraIntrinsics, extr: CameraExtrinsics):
    """Project world points (N, 3) to pixels.

    Returns (uv (N, 2), visible (N,)).  Points at depth <= MIN_DEPTH or
    outside the image are flagged invisible; their uv is still returned
    when finite (NaN behind the camera).
    """
    pc = extr.to_camera(points)
    z = pc[..., 2]
    in_front = z > MIN_DEPTH
    safe = np.where(in_front, z, 1.0)
    u = intr.fx * pc[..., 0] / safe + intr.cx
    v = intr.fy * pc[..., 1] / safe + intr.cy
    uv = np.stack([u, v], axis=-1)
    uv[~in_front] = np.nan
    inside = (u >= 0) & (u <= intr.width) & (v >= 0) & (v <= intr.height)
    return uv, in_front & inside


def sample_camera(cfg: CameraSamplingConfig, rng=None) -> CameraExtrinsics:
    """Draw a translation uniformly from the configured box; rotation is the
    canonical overhead pose (optionally rolled about the optical axis)."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    t = np.array([rng.uniform(*cfg.tx), rng.uniform(*cfg.ty), rng.uniform(*cfg.tz)])
    R = OVERHEAD_ROTATION
    if not cfg.fixed_rotation:
        a = np.deg2rad(rng.uniform(-cfg.roll_deg, cfg.roll_deg))
        c, s = np.cos(a), np.sin(a)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]) @ R
    return CameraExtrinsics(R, t)


def invert(extr: CameraExtrinsics) -> CameraExtrinsics:
    R = extr.rotation.T
    return CameraExtrinsics(R, -R @ extr.translation)
