"""Equirectangular re-projection of fisheye images and box annotations.

Columns carry azimuth, rows carry the polar angle from the optical axis:

    phi   = -pi + 2*pi * ue / width
    theta = theta_max * ve / height        (theta = 0 on the top row)

Raster policy: output pixel (row i, col j) samples the continuous point
(j + 0.5, i + 0.5).  Source coordinates are snapped to a 1/1024 px lattice and
blended with integer weights, so the result depends only on the snapped
coordinates and is reproducible bit-for-bit wherever those agree.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .camera_model import CameraModel, pixel_polar, radius_from_theta
from .errors import ConfigError, OutOfCalibrationRange
from .structures import BBox

BOX_SAMPLES = 64
_SUBPIXEL = 1024


@dataclass(frozen=True)
class EquirectSpec:
    width_px: int
    height_px: int
    theta_max_rad: float

    def __post_init__(self):
        if self.width_px < 2 or self.height_px < 2:
            raise ConfigError("equirect output must be at least 2x2")
        if not 0 < self.theta_max_rad <= math.pi:
            raise ConfigError("theta_max_rad must lie in (0, pi]")


def equirect_pixel_to_fisheye(model: CameraModel, spec: EquirectSpec, eq_pixel) -> np.ndarray:
    """Fisheye pixel(s) seen at equirect coordinate(s) (..., 2)."""
    p = np.asarray(eq_pixel, dtype=float)
    phi = -math.pi + 2 * math.pi * p[..., 0] / spec.width_px
    theta = spec.theta_max_rad * p[..., 1] / spec.height_px
    r_px = np.asarray(radius_from_theta(model, theta)) / model.pixel_pitch_mm
    u = model.principal_point[0] + r_px * np.cos(phi)
    v = model.principal_point[1] + r_px * np.sin(phi)
    return np.stack([u, v], axis=-1)


def fisheye_pixel_to_equirect(model: CameraModel, spec: EquirectSpec, pixel) -> np.ndarray:
    theta, phi = pixel_polar(model, pixel)
    ue = (np.asarray(phi) + math.pi) / (2 * math.pi) * spec.width_px
    ve = np.asarray(theta) / spec.theta_max_rad * spec.height_px
    return np.stack([ue, ve], axis=-1)


def bilinear_sample(image: np.ndarray, u: np.ndarray, v: np.ndarray, fill: int = 0) -> np.ndarray:
    """Sample a uint8 raster at continuous pixel coordinates (pixel centres at +0.5)."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    x = np.rint((u - 0.5) * _SUBPIXEL)
    y = np.rint((v - 0.5) * _SUBPIXEL)
    ok = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (y >= 0) & (x <= (w - 1) * _SUBPIXEL) & (y <= (h - 1) * _SUBPIXEL)
    xi = np.where(ok, x, 0).astype(np.int64)
    yi = np.where(ok, y, 0).astype(np.int64)
    x0, fx = np.divmod(xi, _SUBPIXEL)
    y0, fy = np.divmod(yi, _SUBPIXEL)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    src = img.astype(np.int64)
    if src.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
        ok_b = ok[..., None]
    else:
        ok_b = ok
    gx, gy = _SUBPIXEL - fx, _SUBPIXEL - fy
    acc = (
        src[y0, x0] * gx * gy
        + src[y0, x1] * fx * gy
        + src[y1, x0] * gx * fy
        + src[y1, x1] * fx * fy
    )
    half = _SUBPIXEL * _SUBPIXEL // 2
    out = (acc + half) // (_SUBPIXEL * _SUBPIXEL)
    return np.where(ok_b, out, fill).astype(np.uint8)


def fisheye_to_equirect(image: np.ndarray, model: CameraModel, spec: EquirectSpec, fill: int = 0) -> np.ndarray:
    cols = np.arange(spec.width_px) + 0.5
    rows = np.arange(spec.height_px) + 0.5
    ue, ve = np.meshgrid(cols, rows)
    theta = spec.theta_max_rad * ve / spec.height_px
    inside = theta <= model.max_theta
    src = equirect_pixel_to_fisheye(model, spec, np.stack([ue, np.where(inside, ve, 0.0)], axis=-1))
    u = np.where(inside, src[..., 0], np.nan)
    v = np.where(inside, src[..., 1], np.nan)
    return bilinear_sample(image, u, v, fill)


def box_boundary(box: BBox, k: int = BOX_SAMPLES) -> np.ndarray:
    """``k`` points evenly spaced along the box perimeter, starting at the top-left corner."""
    x0, y0, x1, y1 = box.corners
    t = np.arange(k) * (2 * (box.w + box.h) / k)
    pts = np.empty((k, 2))
    for i, s in enumerate(t):
        if s < box.w:
            pts[i] = (x0 + s, y0)
        elif s < box.w + box.h:
            pts[i] = (x1, y0 + s - box.w)
        elif s < 2 * box.w + box.h:
            pts[i] = (x1 - (s - box.w - box.h), y1)
        else:
            pts[i] = (x0, y1 - (s - 2 * box.w - box.h))
    return pts


def _min_width_interval(ue: np.ndarray, width: float) -> tuple[float, float]:
    """Smallest arc (as an interval possibly extending past ``width``) covering all columns."""
    s = np.sort(np.mod(ue, width))
    gaps = np.diff(np.concatenate([s, [s[0] + width]]))
    g = int(np.argmax(gaps))
    start = s[(g + 1) % len(s)]
    end = s[g]
    if end < start:
        end += width
    return float(start), float(end)


def bbox_to_equirect(model: CameraModel, spec: EquirectSpec, box: BBox) -> BBox:
    """Axis-aligned equirect hull of the mapped box boundary.

    When the naive column span exceeds half the width the hull is taken over
    the shortest arc instead and the result is flagged ``wraps=True``; its
    columns may then extend past the image edge.  A box that contains the
    principal point covers every azimuth and starts at theta = 0.
    """
    pts = box_boundary(box)
    try:
        eq = fisheye_pixel_to_equirect(model, spec, pts)
    except OutOfCalibrationRange:
        raise OutOfCalibrationRange("box boundary leaves the calibrated region") from None
    ue, ve = eq[:, 0], eq[:, 1]
    x0b, y0b, x1b, y1b = box.corners
    cu, cv = model.principal_point
    if x0b <= cu <= x1b and y0b <= cv <= y1b:
        return BBox.from_corners(0.0, 0.0, float(spec.width_px), float(ve.max()))
    wraps = False
    lo, hi = float(ue.min()), float(ue.max())
    if hi - lo > spec.width_px / 2:
        lo, hi = _min_width_interval(ue, spec.width_px)
        wraps = hi > spec.width_px
    hi = max(hi, lo + 1e-9)
    v0, v1 = float(ve.min()), float(ve.max())
    v1 = max(v1, v0 + 1e-9)
    return BBox.from_corners(lo, v0, hi, v1, wraps)


def read_raster(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.array(im)


def write_raster(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError("rasters are stored as 8-bit")
    Image.fromarray(arr).save(path, format="PNG")


def raster_hash(array: np.ndarray) -> str:
    """SHA-256 over shape, dtype and pixel bytes (independent of container encoding)."""
    arr = np.ascontiguousarray(array)
    h = hashlib.sha256()
    h.update(repr((arr.shape, str(arr.dtype))).encode())
    h.update(arr.tobytes())
    return h.hexdigest()
