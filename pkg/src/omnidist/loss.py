"""Training objective: objectness/class BCE, CIoU localisation, L1 distance.

total = l_obj*obj + l_cls*cls + l_loc*loc + l_dist*dist (+ l_ad*camera_height)
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DomainError, EmptyBatch

# obj : cls : loc split of the non-distance weight (stand-in for detector defaults)
DEFAULT_RATIOS = (1.0, 0.3, 0.05)


@dataclass(frozen=True)
class LossWeights:
    lambda_obj: float
    lambda_cls: float
    lambda_loc: float
    lambda_dist: float
    lambda_ad: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (value >= 0 and math.isfinite(value)):
                raise ConfigError(f"{name} must be a finite non-negative weight, got {value}")

    @classmethod
    def default(cls, height_head: bool = False, ratios=DEFAULT_RATIOS) -> "LossWeights":
        """Distance weight 1/3 with the rest split by ``ratios``.

        With the camera-height head, distance and height get 1/6 each.
        """
        if height_head:
            dist, ad = 1.0 / 6.0, 1.0 / 6.0
        else:
            dist, ad = 1.0 / 3.0, 0.0
        rest = 1.0 - dist - ad
        total = sum(ratios)
        obj, cls_, loc = (rest * r / total for r in ratios)
        return cls(obj, cls_, loc, dist, ad)


@dataclass(frozen=True)
class LossBreakdown:
    obj: float
    cls: float
    loc: float
    dist: float
    camera_height: float
    total: float


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def bce_with_logits(logit, target):
    """Binary cross-entropy on a logit; returns (value, d value / d logit).

    Works elementwise on arrays.
    """
    x = np.asarray(logit, dtype=float)
    t = np.asarray(target, dtype=float)
    if np.any(t < 0) or np.any(t > 1):
        raise DomainError("BCE targets must lie in [0, 1]")
    value = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    grad = sigmoid(x) - t
    if value.ndim == 0:
        return float(value), float(grad)
    return value, grad


def ciou_value(a, b):
    """Complete IoU between box arrays of shape (..., 4) as (cx, cy, w, h)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a[..., 2:] <= 0) or np.any(b[..., 2:] <= 0):
        raise DomainError("box width and height must be positive")
    ax0, ax1 = a[..., 0] - a[..., 2] / 2, a[..., 0] + a[..., 2] / 2
    ay0, ay1 = a[..., 1] - a[..., 3] / 2, a[..., 1] + a[..., 3] / 2
    bx0, bx1 = b[..., 0] - b[..., 2] / 2, b[..., 0] + b[..., 2] / 2
    by0, by1 = b[..., 1] - b[..., 3] / 2, b[..., 1] + b[..., 3] / 2
    iw = np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0.0, None)
    ih = np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0.0, None)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    iou = inter / union
    cw = np.maximum(ax1, bx1) - np.minimum(ax0, bx0)
    ch = np.maximum(ay1, by1) - np.minimum(ay0, by0)
    c2 = cw**2 + ch**2
    rho2 = (a[..., 0] - b[..., 0]) ** 2 + (a[..., 1] - b[..., 1]) ** 2
    v = (4.0 / math.pi**2) * (np.arctan(b[..., 2] / b[..., 3]) - np.arctan(a[..., 2] / a[..., 3])) ** 2
    denom = 1.0 - iou + v
    alpha = np.divide(v, denom, out=np.zeros_like(v), where=v > 0)
    out = iou - rho2 / c2 - alpha * v
    return float(out) if out.ndim == 0 else out


def ciou_grad(a, b, rel_step: float = 1e-4):
    """Central finite-difference gradient of CIoU w.r.t. the parameters of ``a``.

    The step for every parameter is ``rel_step * sqrt(w * h)`` of box ``a``.
    Returns an array shaped like ``a``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    h = rel_step * np.sqrt(a[..., 2] * a[..., 3])
    grad = np.empty_like(a)
    for k in range(4):
        step = np.zeros_like(a)
        step[..., k] = h
        grad[..., k] = (ciou_value(a + step, b) - ciou_value(a - step, b)) / (2 * h)
    return grad


def ciou(a, b):
    """(CIoU value, gradient w.r.t. a's (cx, cy, w, h))."""
    return ciou_value(a, b), ciou_grad(a, b)


def distance_loss(pred_norm, gt_norm):
    """Mean L1 between normalised predictions and targets; returns (value, grad).

    An empty batch gives (0.0, empty gradient) and emits :class:`EmptyBatch`.
    """
    p = np.asarray(pred_norm, dtype=float).ravel()
    g = np.asarray(gt_norm, dtype=float).ravel()
    if p.shape != g.shape:
        raise DomainError("prediction and target counts differ")
    n = p.size
    if n == 0:
        warnings.warn("distance loss over zero objects", EmptyBatch, stacklevel=2)
        return 0.0, np.zeros(0)
    diff = p - g
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def total_loss(weights: LossWeights, obj, cls, loc, dist, camera_height=None) -> LossBreakdown:
    """Weighted sum of the components; ``camera_height`` only counts when given."""
    parts = {"obj": obj, "cls": cls, "loc": loc, "dist": dist}
    for name, value in parts.items():
        if not (math.isfinite(value) and value >= 0):
            raise DomainError(f"loss component {name} must be finite and >= 0, got {value}")
    total = (
        weights.lambda_obj * obj
        + weights.lambda_cls * cls
        + weights.lambda_loc * loc
        + weights.lambda_dist * dist
    )
    if camera_height is not None:
        if not (math.isfinite(camera_height) and camera_height >= 0):
            raise DomainError("camera_height loss must be finite and >= 0")
        total += weights.lambda_ad * camera_height
    return LossBreakdown(
        float(obj), float(cls), float(loc), float(dist),
        float(camera_height or 0.0), float(total),
    )
