"""Calibrated fisheye lens model for a downward-facing camera.

The lens is described by an empirical table of (chip radius r in mm, angle
theta from the optical axis in rad).  Between knots the curve is linear; outside
the table there is no extrapolation.

Frames
------
Image: continuous pixel coordinates, origin top-left, u to the right, v down.

World: origin on the ground directly beneath the camera, z up, camera at
(0, 0, H).  With identity pose the optical axis points straight down and the
world x / y axes are the ground directions imaged along +u / +v, so a pixel
at azimuth phi = atan2(v - c_v, u - c_u) sees the camera-frame ray
(sin t cos phi, sin t sin phi, -cos t).

Pose: world_ray = Rz(yaw) @ P(pitch) @ Rx(roll) @ camera_ray.  Positive pitch
tilts the optical axis towards +x, positive roll towards +y.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    CalibrationError,
    FormatError,
    NoGroundIntersection,
    OutOfCalibrationRange,
)

# Rays with |z| below this are treated as parallel to the ground.
_HORIZON_EPS = 1e-12


@dataclass(frozen=True)
class GroundPoint:
    x_m: float
    y_m: float

    @property
    def distance_m(self) -> float:
        return math.hypot(self.x_m, self.y_m)


@dataclass(frozen=True)
class CameraModel:
    theta_r_table: tuple[tuple[float, float], ...]
    pixel_pitch_mm: float
    principal_point: tuple[float, float]
    height_m: float
    pose: tuple[float, float, float] = (0.0, 0.0, 0.0)  # pitch, roll, yaw
    _r: np.ndarray = field(init=False, repr=False, compare=False)
    _theta: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        table = tuple((float(r), float(t)) for r, t in self.theta_r_table)
        if len(table) < 2:
            raise FormatError("theta_r_table needs at least two knots")
        r = np.array([k[0] for k in table])
        theta = np.array([k[1] for k in table])
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(theta))):
            raise CalibrationError("theta_r_table contains non-finite values")
        if r[0] != 0.0 or theta[0] != 0.0:
            raise CalibrationError("theta_r_table must start at (0, 0)")
        if np.any(np.diff(r) <= 0) or np.any(np.diff(theta) <= 0):
            raise CalibrationError("theta_r_table must be strictly increasing in both columns")
        if theta[-1] >= math.pi:
            raise CalibrationError("theta values must lie in [0, pi)")
        if not self.pixel_pitch_mm > 0:
            raise FormatError("pixel_pitch_mm must be positive")
        if not self.height_m > 0:
            raise FormatError("height_m must be positive")
        pp = tuple(float(c) for c in self.principal_point)
        pose = tuple(float(a) for a in self.pose)
        if len(pp) != 2 or len(pose) != 3:
            raise FormatError("principal_point needs 2 values and pose 3 values")
        object.__setattr__(self, "theta_r_table", table)
        object.__setattr__(self, "principal_point", pp)
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "pixel_pitch_mm", float(self.pixel_pitch_mm))
        object.__setattr__(self, "height_m", float(self.height_m))
        r.setflags(write=False)
        theta.setflags(write=False)
        object.__setattr__(self, "_r", r)
        object.__setattr__(self, "_theta", theta)

    @property
    def max_radius_mm(self) -> float:
        return float(self._r[-1])

    @property
    def max_theta(self) -> float:
        return float(self._theta[-1])

    @property
    def max_radius_px(self) -> float:
        return self.max_radius_mm / self.pixel_pitch_mm

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(*self.pose)

    def to_dict(self) -> dict:
        return {
            "pixel_pitch_mm": self.pixel_pitch_mm,
            "principal_point": list(self.principal_point),
            "height_m": self.height_m,
            "pose_rad": list(self.pose),
            "theta_r_table": [list(k) for k in self.theta_r_table],
        }


def rotation_matrix(pitch: float, roll: float, yaw: float) -> np.ndarray:
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    cy, sy = math.cos(yaw), math.sin(yaw)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    # maps the nadir axis (0, 0, -1) to (sin p, 0, -cos p)
    rp = np.array([[cp, 0.0, -sp], [0.0, 1.0, 0.0], [sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return rz @ rp @ rx


_REQUIRED = ("pixel_pitch_mm", "principal_point", "height_m", "pose_rad", "theta_r_table")


def load_camera(document: str | dict) -> CameraModel:
    """Parse a camera-spec document (JSON text or an already-decoded dict)."""
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise FormatError(f"camera spec is not valid JSON: {exc}") from None
    if not isinstance(document, dict):
        raise FormatError("camera spec must be a JSON object")
    missing = [k for k in _REQUIRED if k not in document]
    if missing:
        raise FormatError(f"camera spec missing field(s): {', '.join(missing)}")
    table = document["theta_r_table"]
    if not isinstance(table, list) or not table:
        raise FormatError("theta_r_table must be a non-empty list")
    try:
        pairs = tuple((float(r), float(t)) for r, t in table)
        pitch = float(document["pixel_pitch_mm"])
        pp = tuple(float(c) for c in document["principal_point"])
        pose = tuple(float(a) for a in document["pose_rad"])
        height = float(document["height_m"])
    except (TypeError, ValueError) as exc:
        raise FormatError(f"camera spec has malformed values: {exc}") from None
    return CameraModel(pairs, pitch, pp, height, pose)


def dump_camera(model: CameraModel) -> str:
    return json.dumps(model.to_dict(), indent=2) + "\n"


def read_camera(path) -> CameraModel:
    with open(path, encoding="utf-8") as fh:
        return load_camera(fh.read())


def write_camera(model: CameraModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_camera(model))


def default_theta_r_table(max_radius_mm: float = 0.8, max_theta: float = 1.70, knots: int = 33):
    """Synthetic equidistant-like calibration curve.

    theta grows as 0.9*s + 0.1*s**3 in the normalised radius s, i.e. nearly
    equidistant with mild compression towards the rim.  Not a measured lens.
    """
    s = np.linspace(0.0, 1.0, knots)
    theta = max_theta * (0.9 * s + 0.1 * s**3)
    r = max_radius_mm * s
    return tuple((float(a), float(b)) for a, b in zip(r, theta))


def default_camera(image_side: int = 512, height_m: float = 2.5, max_radius_mm: float = 0.8) -> CameraModel:
    """Camera centred on a square image whose calibrated circle just covers the inscribed circle."""
    pitch = max_radius_mm / (0.52 * image_side)
    c = image_side / 2.0
    return CameraModel(default_theta_r_table(max_radius_mm), pitch, (c, c), height_m)


def _check_range(values, upper, what):
    values = np.asarray(values, dtype=float)
    if np.any(~np.isfinite(values)) or np.any(values < 0) or np.any(values > upper):
        raise OutOfCalibrationRange(f"{what} outside calibrated range [0, {upper:g}]")
    return values


def theta_from_radius(model: CameraModel, r_mm):
    """Angle from the optical axis for a chip radius (scalar or array)."""
    r = _check_range(r_mm, model.max_radius_mm, "radius")
    out = np.interp(r, model._r, model._theta)
    return float(out) if out.ndim == 0 else out


def radius_from_theta(model: CameraModel, theta):
    t = _check_range(theta, model.max_theta, "theta")
    out = np.interp(t, model._theta, model._r)
    return float(out) if out.ndim == 0 else out


def pixel_polar(model: CameraModel, pixel):
    """(theta, phi) of pixel(s) in the camera frame."""
    p = np.asarray(pixel, dtype=float)
    du = p[..., 0] - model.principal_point[0]
    dv = p[..., 1] - model.principal_point[1]
    r_mm = model.pixel_pitch_mm * np.hypot(du, dv)
    return theta_from_radius(model, r_mm), np.arctan2(dv, du)


def pixel_to_ray(model: CameraModel, pixel) -> np.ndarray:
    """Unit world-frame viewing direction(s) for pixel(s) of shape (..., 2)."""
    theta, phi = pixel_polar(model, pixel)
    st = np.sin(theta)
    cam = np.stack([st * np.cos(phi), st * np.sin(phi), -np.cos(theta)], axis=-1)
    world = cam @ model.rotation.T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def ground_xy(model: CameraModel, pixel) -> np.ndarray:
    """Ground intersection (x, y) for pixel(s); NaN where the ray misses the ground.

    Pixels outside the calibrated disk still raise OutOfCalibrationRange.
    """
    ray = pixel_to_ray(model, pixel)
    dz = ray[..., 2]
    hit = dz < -_HORIZON_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(hit, model.height_m / -dz, np.nan)
    return ray[..., :2] * t[..., None]


def ground_point(model: CameraModel, pixel) -> GroundPoint:
    xy = ground_xy(model, pixel)
    if xy.shape != (2,):
        raise ValueError("ground_point takes a single pixel")
    if not np.all(np.isfinite(xy)):
        raise NoGroundIntersection(f"ray through pixel {tuple(pixel)} does not reach the ground")
    return GroundPoint(float(xy[0]), float(xy[1]))


def ground_distance(model: CameraModel, pixel):
    """Horizontal distance (m) from the camera footprint to where the pixel's ray hits z=0."""
    xy = ground_xy(model, pixel)
    d = np.hypot(xy[..., 0], xy[..., 1])
    if np.any(~np.isfinite(d)):
        raise NoGroundIntersection("ray does not reach the ground plane")
    return float(d) if d.ndim == 0 else d


def project_point(model: CameraModel, xyz) -> np.ndarray:
    """Pixel(s) at which world point(s) of shape (..., 3) are imaged."""
    pts = np.asarray(xyz, dtype=float)
    ray = pts - np.array([0.0, 0.0, model.height_m])
    cam = ray @ model.rotation  # R^T applied row-wise
    horiz = np.hypot(cam[..., 0], cam[..., 1])
    theta = np.arctan2(horiz, -cam[..., 2])
    phi = np.arctan2(cam[..., 1], cam[..., 0])
    r_px = radius_from_theta(model, theta) / model.pixel_pitch_mm
    u = model.principal_point[0] + r_px * np.cos(phi)
    v = model.principal_point[1] + r_px * np.sin(phi)
    return np.stack([u, v], axis=-1)


def ground_point_to_pixel(model: CameraModel, point: GroundPoint) -> tuple[float, float]:
    """Inverse of ground_point: the pixel imaging a point on z=0.

    The camera-frame direction is obtained by applying the transposed pose
    rotation, so no iteration is needed for arbitrary pose.
    """
    uv = project_point(model, (point.x_m, point.y_m, 0.0))
    return float(uv[0]), float(uv[1])


def shift_principal_point(model: CameraModel, dx_px: float, dy_px: float) -> CameraModel:
    c_u, c_v = model.principal_point
    return replace(model, principal_point=(c_u + dx_px, c_v + dy_px))


def perturb_pose(model: CameraModel, dpitch_rad: float, droll_rad: float, dyaw_rad: float = 0.0) -> CameraModel:
    pitch, roll, yaw = model.pose
    return replace(model, pose=(pitch + dpitch_rad, roll + droll_rad, yaw + dyaw_rad))
