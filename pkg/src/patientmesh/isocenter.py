"""Body-part thickness and table-height adjustment for CT isocentering.

Heights are measured along the table normal in the scanner frame.  Public
results are millimeters; inputs are meters.
"""

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from .body_model import REGION_NAMES, BodyModel, PosedBody, compute_regions
from .errors import ConfigError, DataFormatError


@dataclass(frozen=True, eq=False)
class ScannerCalibration:
    rotation: np.ndarray  # camera -> scanner
    translation: np.ndarray
    table_normal: np.ndarray  # unit, scanner frame
    isocenter: np.ndarray  # scanner frame, meters
    table_height: float  # table surface position along the normal, meters
    travel_limits: tuple = (-np.inf, np.inf)  # allowed table displacement, meters

    def __post_init__(self):
        R = np.asarray(self.rotation, float).reshape(3, 3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ConfigError("calibration rotation must be orthonormal with det +1")
        n = np.asarray(self.table_normal, float).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ConfigError("table normal must be a unit vector")
        lo, hi = self.travel_limits
        if lo > hi:
            raise ConfigError("travel limits: min > max")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, float).reshape(3))
        object.__setattr__(self, "table_normal", n)
        object.__setattr__(self, "isocenter", np.asarray(self.isocenter, float).reshape(3))
        object.__setattr__(self, "table_height", float(self.table_height))
        object.__setattr__(self, "travel_limits", (float(lo), float(hi)))

    def to_scanner(self, points):
        return np.asarray(points, float) @ self.rotation.T + self.translation

    @property
    def isocenter_height(self):
        return float(self.isocenter @ self.table_normal)


@dataclass(frozen=True)
class BodyRegion:
    name: str
    indices: np.ndarray


@dataclass(frozen=True)
class IsoResult:
    region: str
    thickness_mm: float
    center_height_mm: float
    displacement_mm: float  # signed, along the table normal, after travel clamps
    isocenter_height_mm: float


def load_calibration(path) -> ScannerCalibration:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"calibration file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise DataFormatError(f"{path}: cannot parse calibration ({exc})") from exc
    try:
        return ScannerCalibration(
            rotation=np.asarray(doc["R"], float).reshape(3, 3),
            translation=doc["t"],
            table_normal=doc["table_normal"],
            isocenter=doc["isocenter"],
            table_height=doc["table_height"],
            travel_limits=tuple(doc.get("travel_limits", (-np.inf, np.inf))),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: invalid calibration ({exc})") from exc


def save_calibration(calib: ScannerCalibration, path):
    doc = {
        "R": calib.rotation.ravel().tolist(),
        "t": calib.translation.tolist(),
        "table_normal": calib.table_normal.tolist(),
        "isocenter": calib.isocenter.tolist(),
        "table_height": calib.table_height,
    }
    if np.all(np.isfinite(calib.travel_limits)):
        doc["travel_limits"] = list(calib.travel_limits)
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")


def region_mask(model: BodyModel, name) -> BodyRegion:
    regions = model.regions or compute_regions(model)
    if name not in regions:
        valid = ", ".join(sorted(regions)) or ", ".join(REGION_NAMES)
        raise ConfigError(f"unknown region {name!r}; valid regions: {valid}")
    return BodyRegion(name, np.asarray(regions[name]))


def heights_along_normal(body: PosedBody, calib: ScannerCalibration, indices=None):
    verts = body.vertices if indices is None else body.vertices[indices]
    return calib.to_scanner(verts) @ calib.table_normal


def thickness(body: PosedBody, region: BodyRegion, calib: ScannerCalibration) -> IsoResult:
    """Extent of the region along the table normal, its midpoint, and the
    table displacement that brings the midpoint to the isocenter."""
    if len(region.indices) == 0:
        raise ValueError(f"region {region.name!r} is empty")
    h = heights_along_normal(body, calib, region.indices)
    lo, hi = h.min(), h.max()
    center = 0.5 * (lo + hi)
    iso = calib.isocenter_height
    disp = float(np.clip(iso - center, *calib.travel_limits))
    return IsoResult(region.name, 1000.0 * (hi - lo), 1000.0 * center, 1000.0 * disp, 1000.0 * iso)


def iso_error(result: IsoResult, gt_center_height_mm) -> float:
    """|true part center after moving the table - isocenter|, in mm."""
    aligned = gt_center_height_mm + result.displacement_mm
    return float(abs(aligned - result.isocenter_height_mm))


def rest_on_table(body: PosedBody, calib: ScannerCalibration, indices=None) -> PosedBody:
    """Translate a camera-frame body along the table normal so the lowest of
    ``indices`` (all vertices when None) touches the table surface.  Used
    when the body's position above the table is unknown (the regressor
    predicts pose and shape only)."""
    lowest = heights_along_normal(body, calib, indices).min()
    shift_scanner = (calib.table_height - lowest) * calib.table_normal
    shift_camera = calib.rotation.T @ shift_scanner
    return PosedBody(body.vertices + shift_camera, body.joints + shift_camera,
                     body.keypoints_3d + shift_camera)


def apply_displacement(body: PosedBody, result: IsoResult, calib: ScannerCalibration) -> PosedBody:
    """Move a camera-frame body with the table by the computed displacement."""
    shift = calib.rotation.T @ (result.displacement_mm / 1000.0 * calib.table_normal)
    return PosedBody(body.vertices + shift, body.joints + shift, body.keypoints_3d + shift)


def with_travel_limits(calib, lo, hi):
    return replace(calib, travel_limits=(lo, hi))


def calibration_from_extrinsics(extr, table_height, isocenter,
                                table_normal=(0.0, 1.0, 0.0), travel_limits=(-np.inf, np.inf)):
    """Calibration whose scanner frame is the world frame of ``extr``
    (world -> camera), i.e. camera -> scanner is the inverse extrinsic."""
    R = extr.rotation.T
    return ScannerCalibration(R, -R @ extr.translation, np.asarray(table_normal, float),
                              np.asarray(isocenter, float), table_height, travel_limits)


def to_camera_frame(body: PosedBody, calib: ScannerCalibration) -> PosedBody:
    """Express a scanner-frame body in the camera frame of ``calib``."""
    inv = lambda p: (np.asarray(p) - calib.translation) @ calib.rotation
    return PosedBody(inv(body.vertices), inv(body.joints), inv(body.keypoints_3d))


def estimate(body_world: PosedBody, region: BodyRegion, calib: ScannerCalibration, rest=True) -> IsoResult:
    """Isocentering for a body posed in the model's world frame.

    The world frame is taken to coincide with the scanner frame up to a
    translation (the camera mount fixes the rotation).  With ``rest`` the
    body is first lowered until the region's own lowest vertex touches the
    table, since a pose-and-shape estimate carries no absolute position.
    Resting on the region rather than the whole body keeps a raised limb or
    a small pose error elsewhere from lifting the scanned part.
    """
    body = to_camera_frame(body_world, calib)
    if rest:
        body = rest_on_table(body, calib, region.indices)
    return thickness(body, region, calib)
