"""Calibration-perturbation experiments for the geometric estimator and the toy head.

A perturbation describes what happened to the physical camera after
calibration; the estimator keeps using the calibrated model.  ``shift_px``
translates the image content (a principal-point drift seen from the fixed
calibration), the pose deltas tilt the real camera.  Errors are reported
against the unperturbed run, so the identity perturbation has zero deltas.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .camera_model import CameraModel, ground_xy, perturb_pose, project_point
from .errors import ConfigError, NoGroundIntersection, OutOfCalibrationRange
from .evaluation import match_detections
from .projection import bilinear_sample
from .structures import BBox

_UNCALIBRATED = (OutOfCalibrationRange, NoGroundIntersection)


@dataclass(frozen=True)
class Perturbation:
    label: str
    shift_px: tuple[float, float] = (0.0, 0.0)
    dpitch_rad: float = 0.0
    droll_rad: float = 0.0
    dyaw_rad: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "shift_px", tuple(float(x) for x in self.shift_px))
        values = (*self.shift_px, self.dpitch_rad, self.droll_rad, self.dyaw_rad)
        if len(self.shift_px) != 2 or not all(math.isfinite(x) for x in values):
            raise ConfigError(f"perturbation {self.label!r} needs a finite 2-vector shift and finite angles")

    @property
    def has_pose(self) -> bool:
        return any((self.dpitch_rad, self.droll_rad, self.dyaw_rad))

    @property
    def magnitude_px(self) -> float:
        return math.hypot(*self.shift_px)

    @classmethod
    def from_dict(cls, d: dict) -> "Perturbation":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def shift_x(px: float) -> Perturbation:
    return Perturbation(f"shift {px:g}px", (px, 0.0))


def contact_pixel(box: BBox) -> tuple[float, float]:
    """Ground-contact pixel of a box: its bottom-centre."""
    return box.cx, box.corners[3]


def apparent_pixel(model: CameraModel, p: Perturbation, pixel) -> tuple[float, float]:
    """Where the ground content seen at ``pixel`` by the calibrated camera appears after ``p``."""
    u, v = pixel
    if p.has_pose:
        xy = ground_xy(model, (u, v))
        if not np.all(np.isfinite(xy)):
            raise NoGroundIntersection("contact ray misses the ground")
        tilted = perturb_pose(model, p.dpitch_rad, p.droll_rad, p.dyaw_rad)
        u, v = project_point(tilted, (float(xy[0]), float(xy[1]), 0.0))
    return float(u) + p.shift_px[0], float(v) + p.shift_px[1]


def geometric_distance(model: CameraModel, box: BBox, p: Perturbation | None = None) -> float | None:
    """Calibrated-model distance at the box's contact pixel; None when uncalibrated."""
    pixel = contact_pixel(box)
    try:
        if p is not None:
            pixel = apparent_pixel(model, p, pixel)
        xy = ground_xy(model, pixel)
    except _UNCALIBRATED:
        return None
    d = float(np.hypot(xy[0], xy[1]))
    return d if math.isfinite(d) else None


def shift_image(image: np.ndarray, dx: float, dy: float, fill: int = 0) -> np.ndarray:
    """Translate raster content by (dx, dy) pixels with black fill."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    uu, vv = np.meshgrid(np.arange(w) + 0.5 - dx, np.arange(h) + 0.5 - dy)
    return bilinear_sample(img, uu, vv, fill)


def shift_box(box: BBox, dx: float, dy: float) -> BBox:
    return BBox(box.cx + dx, box.cy + dy, box.w, box.h, box.wraps)


@dataclass
class RobustnessRow:
    label: str
    shift_px: tuple[float, float]
    dpitch_rad: float
    droll_rad: float
    dyaw_rad: float
    n_objects: int
    n_flagged: int
    absolute_error_m: float | None
    far_absolute_error_m: float | None
    delta_m: float | None
    far_delta_m: float | None
    model_absolute_error_m: float | None = None
    model_delta_m: float | None = None
    model_pairs: int | None = None


@dataclass
class RobustnessReport:
    far_bin: tuple[float, float]
    rows: list[RobustnessRow] = field(default_factory=list)

    def row(self, label: str) -> RobustnessRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {"far_bin": list(self.far_bin), "rows": [asdict(r) for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        cols = list(asdict(self.rows[0]).keys()) if self.rows else []
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow(["" if v is None else (" ".join(map(repr, v)) if isinstance(v, tuple) else v)
                        for v in asdict(r).values()])
        return buf.getvalue()


def _mean(values) -> float | None:
    return float(np.mean(values)) if len(values) else None


def _diff(a, b):
    return None if a is None or b is None else a - b


def default_far_bin(distances) -> tuple[float, float]:
    """Top fifth of the observed distance range, closed at the top."""
    lo, hi = float(np.min(distances)), float(np.max(distances))
    return lo + 0.8 * (hi - lo), math.nextafter(hi, math.inf)


def _geometric_errors(dataset, p: Perturbation | None):
    errors, truth, flagged = [], [], 0
    for rec in dataset.records:
        cam = dataset.camera_for(rec)
        for obj in rec.objects:
            est = geometric_distance(cam, obj.bbox, p)
            if est is None:
                flagged += 1
                continue
            errors.append(abs(est - obj.distance_m))
            truth.append(obj.distance_m)
    return np.array(errors), np.array(truth), flagged


def _model_error(dataset, images, toy, p: Perturbation):
    """Mean absolute distance error of the toy head on shifted images (IoU >= 0.5 pairs)."""
    from .toy_model import predict

    params, cfg = toy
    errs = []
    dx, dy = p.shift_px
    for rec, img in zip(dataset.records, images):
        shifted = shift_image(img, dx, dy) if (dx or dy) else img
        dets, _ = predict(params, shifted, cfg, dataset.camera_for(rec))
        gts = [type(o)(o.class_id, shift_box(o.bbox, dx, dy), o.distance_m) for o in rec.objects]
        m = match_detections(dets, gts, 0.5)
        errs.extend(abs(dets[di].distance_m - gts[gi].distance_m) for di, gi, _ in m.pairs)
    return _mean(errs), len(errs)


def run_robustness(dataset, perturbations, far_bin=None, toy=None, images=None) -> RobustnessReport:
    """Evaluate every perturbation against the unperturbed baseline.

    ``toy`` is an optional ``(HeadParams, HeadConfig)`` pair; it is evaluated on
    translated images for pure shifts (pose rows leave its columns empty, since
    a tilt cannot be simulated by warping a single image of 3-D objects).
    """
    base_err, base_truth, _ = _geometric_errors(dataset, None)
    if far_bin is None:
        if base_truth.size == 0:
            raise ConfigError("dataset has no objects with a calibrated contact pixel")
        far_bin = default_far_bin(base_truth)
    lo, hi = far_bin
    if not hi > lo:
        raise ConfigError("far bin must satisfy lo < hi")

    def far_mean(err, truth):
        sel = (truth >= lo) & (truth < hi)
        return _mean(err[sel])

    base_abs, base_far = _mean(base_err), far_mean(base_err, base_truth)
    if toy is not None:
        if images is None:
            from .toy_model import load_images

            images = load_images(dataset)
        base_model, _ = _model_error(dataset, images, toy, Perturbation("baseline"))
    report = RobustnessReport((lo, hi))
    for p in perturbations:
        err, truth, flagged = _geometric_errors(dataset, p)
        a, f = _mean(err), far_mean(err, truth)
        row = RobustnessRow(p.label, p.shift_px, p.dpitch_rad, p.droll_rad, p.dyaw_rad,
                            int(err.size + flagged), flagged, a, f, _diff(a, base_abs), _diff(f, base_far))
        if toy is not None and not p.has_pose:
            row.model_absolute_error_m, row.model_pairs = _model_error(dataset, images, toy, p)
            row.model_delta_m = _diff(row.model_absolute_error_m, base_model)
        report.rows.append(row)
    return report


def plot_svg(report: RobustnessReport, path) -> None:
    """Absolute-error-vs-shift line plot for the pure-shift rows."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "omnidist"
    rows = sorted((r for r in report.rows if not any((r.dpitch_rad, r.droll_rad, r.dyaw_rad))),
                  key=lambda r: math.hypot(*r.shift_px))
    x = [math.hypot(*r.shift_px) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    series = [("geometric", "absolute_error_m"), ("geometric, far bin", "far_absolute_error_m"),
              ("learned head", "model_absolute_error_m")]
    for name, attr in series:
        y = [getattr(r, attr) for r in rows]
        if all(v is not None for v in y) and y:
            ax.plot(x, y, marker="o", label=name)
    ax.set_xlabel("image shift (px)")
    ax.set_ylabel("absolute error (m)")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
