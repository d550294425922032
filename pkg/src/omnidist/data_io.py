"""Annotation/detection documents and the synthetic fisheye scene generator.

Canonical documents are JSON Lines, one image per line::

    {"image": "images/00000.png", "camera": "camera.json",
     "objects": [{"class_id": 0, "bbox": [cx, cy, w, h], "distance_m": 4.2}]}

Detection documents replace ``objects`` with ``detections`` whose entries add
``confidence`` and carry the predicted ``distance_m`` (null when unavailable).
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .camera_model import CameraModel, pixel_to_ray, project_point, read_camera, write_camera
from .errors import ConfigError, FormatError, GenerationError, ValidationError
from .projection import write_raster
from .structures import BBox, Detection, GroundTruthObject

FORMAT_VERSION = 1


@dataclass
class ImageRecord:
    image: str
    camera: str
    objects: list[GroundTruthObject] = field(default_factory=list)


@dataclass
class DetectionRecord:
    image: str
    detections: list[Detection] = field(default_factory=list)


def _parse_bbox(raw, line):
    if not isinstance(raw, list) or len(raw) != 4:
        raise FormatError("bbox must be a list [cx, cy, w, h]", line)
    try:
        values = [float(x) for x in raw]
    except (TypeError, ValueError):
        raise FormatError("bbox values must be numbers", line) from None
    if values[2] <= 0 or values[3] <= 0:
        raise ValidationError("bbox width and height must be positive", line)
    return BBox(*values)


def _lines(document: str):
    for lineno, text in enumerate(document.splitlines(), start=1):
        if not text.strip():
            continue
        try:
            record = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(record, dict):
            raise FormatError("each line must hold a JSON object", lineno)
        yield lineno, record


def _require(record, keys, line):
    for k in keys:
        if k not in record:
            raise FormatError(f"missing field {k!r}", line)


def _parse_distance(raw, line, allow_null=False):
    if raw is None and allow_null:
        return None
    try:
        d = float(raw)
    except (TypeError, ValueError):
        raise FormatError("distance_m must be a number", line) from None
    if not math.isfinite(d) or d < 0:
        raise ValidationError(f"distance_m must be finite and >= 0, got {raw}", line)
    return d


def read_annotations(document: str) -> list[ImageRecord]:
    records = []
    for line, rec in _lines(document):
        _require(rec, ("image", "camera", "objects"), line)
        if not isinstance(rec["objects"], list):
            raise FormatError("objects must be a list", line)
        objs = []
        for o in rec["objects"]:
            if not isinstance(o, dict):
                raise FormatError("object entries must be JSON objects", line)
            _require(o, ("class_id", "bbox", "distance_m"), line)
            objs.append(GroundTruthObject(int(o["class_id"]), _parse_bbox(o["bbox"], line),
                                          _parse_distance(o["distance_m"], line)))
        records.append(ImageRecord(str(rec["image"]), str(rec["camera"]), objs))
    return records


def write_annotations(records) -> str:
    out = []
    for r in records:
        objs = [{"class_id": o.class_id, "bbox": o.bbox.as_list(), "distance_m": o.distance_m} for o in r.objects]
        out.append(json.dumps({"image": r.image, "camera": r.camera, "objects": objs}))
    return "".join(line + "\n" for line in out)


def read_detections(document: str) -> list[DetectionRecord]:
    records = []
    for line, rec in _lines(document):
        _require(rec, ("image", "detections"), line)
        if not isinstance(rec["detections"], list):
            raise FormatError("detections must be a list", line)
        dets = []
        for o in rec["detections"]:
            if not isinstance(o, dict):
                raise FormatError("detection entries must be JSON objects", line)
            _require(o, ("class_id", "bbox", "confidence"), line)
            try:
                conf = float(o["confidence"])
            except (TypeError, ValueError):
                raise FormatError("confidence must be a number", line) from None
            if not 0.0 <= conf <= 1.0:
                raise ValidationError(f"confidence must lie in [0, 1], got {conf}", line)
            dets.append(Detection(int(o["class_id"]), _parse_bbox(o["bbox"], line), conf,
                                  _parse_distance(o.get("distance_m"), line, allow_null=True)))
        records.append(DetectionRecord(str(rec["image"]), dets))
    return records


def write_detections(records) -> str:
    out = []
    for r in records:
        dets = [{"class_id": d.class_id, "bbox": d.bbox.as_list(), "confidence": d.confidence,
                 "distance_m": d.distance_m} for d in r.detections]
        out.append(json.dumps({"image": r.image, "detections": dets}))
    return "".join(line + "\n" for line in out)


def resolve_cameras(records, base_dir) -> dict[str, CameraModel]:
    """Load every camera referenced by ``records`` (paths relative to ``base_dir``)."""
    base = Path(base_dir)
    return {ref: read_camera(base / ref) for ref in sorted({r.camera for r in records})}


def from_coco(coco: dict, camera_ref: str, distance_key: str = "distance") -> list[ImageRecord]:
    """Convert a COCO-style document whose annotations carry a distance field.

    COCO boxes are [x_min, y_min, w, h]; annotations without ``distance_key``
    are rejected because the canonical format requires a distance.
    """
    by_image = {img["id"]: ImageRecord(img["file_name"], camera_ref) for img in coco.get("images", [])}
    for ann in coco.get("annotations", []):
        if distance_key not in ann:
            raise FormatError(f"annotation {ann.get('id')} lacks {distance_key!r}")
        x, y, w, h = (float(v) for v in ann["bbox"])
        d = float(ann[distance_key])
        if d < 0:
            raise ValidationError(f"annotation {ann.get('id')} has negative distance")
        by_image[ann["image_id"]].objects.append(
            GroundTruthObject(int(ann["category_id"]), BBox(x + w / 2, y + h / 2, w, h), d))
    return list(by_image.values())


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneConfig:
    image_side_px: int = 256
    object_count: tuple[int, int] = (1, 3)
    object_radius_m: tuple[float, float] = (0.25, 0.35)
    object_height_m: tuple[float, float] = (0.8, 1.2)
    distance_m: tuple[float, float] = (2.0, 8.0)
    texture_seed: int = 0
    noise_level: float = 0.02
    num_classes: int = 1
    min_gap_px: float = 4.0

    def __post_init__(self):
        for name in ("object_count", "object_radius_m", "object_height_m", "distance_m"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range is inverted")
            object.__setattr__(self, name, (lo, hi))
        if self.object_count[0] < 0 or self.distance_m[0] < 0 or self.object_radius_m[0] <= 0:
            raise ConfigError("counts, radii and distances must be non-negative")
        if self.object_height_m[0] <= 0 or self.noise_level < 0 or self.num_classes < 1:
            raise ConfigError("invalid object height, noise level or class count")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class Cylinder:
    x_m: float
    y_m: float
    radius_m: float
    height_m: float
    class_id: int = 0
    intensity: float = 0.85

    @property
    def distance_m(self) -> float:
        return math.hypot(self.x_m, self.y_m)


_CLASS_INTENSITY = (0.85, 0.6, 0.05)


def class_intensity(class_id: int) -> float:
    return _CLASS_INTENSITY[class_id % 3]


def silhouette_samples(cyl: Cylinder, n_azimuth: int = 48, n_levels: int = 5) -> np.ndarray:
    """Surface points on the cylinder rim circles and intermediate heights."""
    a = np.linspace(0.0, 2 * math.pi, n_azimuth, endpoint=False)
    z = np.linspace(0.0, cyl.height_m, n_levels)
    aa, zz = np.meshgrid(a, z)
    return np.stack([cyl.x_m + cyl.radius_m * np.cos(aa), cyl.y_m + cyl.radius_m * np.sin(aa), zz], -1).reshape(-1, 3)


def project_silhouette(model: CameraModel, cyl: Cylinder) -> np.ndarray:
    return project_point(model, silhouette_samples(cyl))


def cylinder_bbox(model: CameraModel, cyl: Cylinder) -> BBox:
    pts = project_silhouette(model, cyl)
    return BBox.from_corners(pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())


@functools.lru_cache(maxsize=8)
def _pixel_rays(model: CameraModel, side: int):
    """World rays through every pixel centre; NaN outside the calibrated disk."""
    c = np.arange(side) + 0.5
    uu, vv = np.meshgrid(c, c)
    du = uu - model.principal_point[0]
    dv = vv - model.principal_point[1]
    inside = np.hypot(du, dv) <= model.max_radius_px
    rays = np.full((side, side, 3), np.nan)
    rays[inside] = pixel_to_ray(model, np.stack([uu[inside], vv[inside]], -1))
    rays.setflags(write=False)
    inside.setflags(write=False)
    return rays, inside


def cylinder_mask(model: CameraModel, cyl: Cylinder, side: int) -> np.ndarray:
    """Pixels whose ray passes through the solid cylinder before reaching the ground."""
    rays, inside = _pixel_rays(model, side)
    mask = np.zeros((side, side), dtype=bool)
    box = cylinder_bbox(model, cyl)
    x0, y0, x1, y1 = box.corners
    c0, c1 = max(int(math.floor(x0)) - 1, 0), min(int(math.ceil(x1)) + 1, side)
    r0, r1 = max(int(math.floor(y0)) - 1, 0), min(int(math.ceil(y1)) + 1, side)
    if c0 >= c1 or r0 >= r1:
        return mask
    d = rays[r0:r1, c0:c1]
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    with np.errstate(invalid="ignore", divide="ignore"):
        a = dx * dx + dy * dy
        b = -2.0 * (dx * cyl.x_m + dy * cyl.y_m)
        cc = cyl.x_m**2 + cyl.y_m**2 - cyl.radius_m**2
        disc = b * b - 4 * a * cc
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        t1 = (-b - sq) / (2 * a)
        t2 = (-b + sq) / (2 * a)
        t_top = (model.height_m - cyl.height_m) / -dz
        t_ground = model.height_m / -dz
        hit = (dz < 0) & (disc >= 0) & (np.maximum(t1, t_top) <= np.minimum(t2, t_ground))
    mask[r0:r1, c0:c1] = np.where(inside[r0:r1, c0:c1], hit, False)
    return mask


def _background(rng: np.random.Generator, side: int, texture_seed: int) -> np.ndarray:
    tex = np.random.default_rng([texture_seed, int(rng.integers(2**31))])
    c = (np.arange(side) + 0.5) / side
    uu, vv = np.meshgrid(c, c)
    img = np.full((side, side), 0.3)
    for _ in range(4):
        k = tex.uniform(2.0, 9.0, size=2)
        img += 0.015 * np.sin(2 * math.pi * (k[0] * uu + k[1] * vv) + tex.uniform(0, 2 * math.pi))
    return img


def render_scene(model: CameraModel, cfg: SceneConfig, cylinders, rng: np.random.Generator):
    """Rasterise cylinders over a textured background; returns (uint8 image, GT objects)."""
    side = cfg.image_side_px
    img = _background(rng, side, cfg.texture_seed)
    _, inside = _pixel_rays(model, side)
    # far objects first so nearer ones occlude them
    for cyl in sorted(cylinders, key=lambda c: -c.distance_m):
        img[cylinder_mask(model, cyl, side)] = cyl.intensity
    img = img + rng.normal(0.0, cfg.noise_level, size=img.shape) if cfg.noise_level > 0 else img
    img = np.where(inside, img, 0.0)
    raster = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    gts = [GroundTruthObject(c.class_id, cylinder_bbox(model, c), c.distance_m) for c in cylinders]
    return raster, gts


def check_scene_config(model: CameraModel, cfg: SceneConfig) -> None:
    if cfg.object_height_m[1] >= model.height_m:
        raise ConfigError("objects must be lower than the camera")
    far = Cylinder(cfg.distance_m[1] + cfg.object_radius_m[1], 0.0, 1e-3, cfg.object_height_m[1])
    try:
        pts = project_silhouette(model, far)
    except Exception as exc:  # OutOfCalibrationRange
        raise ConfigError(f"distance range exceeds calibration coverage: {exc}") from None
    reach = np.hypot(pts[:, 0] - model.principal_point[0], pts[:, 1] - model.principal_point[1]).max()
    if reach > cfg.image_side_px / 2:
        raise ConfigError("far objects would leave the image")


def _boxes_clear(box: BBox, others, gap: float) -> bool:
    x0, y0, x1, y1 = box.corners
    for o in others:
        a0, b0, a1, b1 = o.corners
        if x0 < a1 + gap and a0 < x1 + gap and y0 < b1 + gap and b0 < y1 + gap:
            return False
    return True


def sample_cylinders(rng: np.random.Generator, model: CameraModel, cfg: SceneConfig, max_tries: int = 100):
    n = int(rng.integers(cfg.object_count[0], cfg.object_count[1] + 1))
    placed, boxes = [], []
    side = cfg.image_side_px
    for _ in range(n):
        for _attempt in range(max_tries):
            d = rng.uniform(*cfg.distance_m)
            az = rng.uniform(-math.pi, math.pi)
            cls = int(rng.integers(cfg.num_classes))
            cyl = Cylinder(d * math.cos(az), d * math.sin(az), rng.uniform(*cfg.object_radius_m),
                           rng.uniform(*cfg.object_height_m), cls,
                           class_intensity(cls) + rng.uniform(-0.04, 0.04))
            try:
                box = cylinder_bbox(model, cyl)
            except Exception:  # OutOfCalibrationRange
                continue
            x0, y0, x1, y1 = box.corners
            if x0 < 0 or y0 < 0 or x1 > side or y1 > side:
                continue
            if _boxes_clear(box, boxes, cfg.min_gap_px):
                placed.append(cyl)
                boxes.append(box)
                break
        else:
            raise GenerationError(f"could not place object {len(placed) + 1} after {max_tries} attempts")
    return placed


def generate_scene(seed, model: CameraModel, cfg: SceneConfig):
    """One synthetic image and its ground truth; deterministic in ``seed``."""
    check_scene_config(model, cfg)
    rng = np.random.default_rng(seed)
    cylinders = sample_cylinders(rng, model, cfg)
    return render_scene(model, cfg, cylinders, rng)


def image_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index)])


def max_threads() -> int:
    try:
        return max(1, int(os.environ.get("OMNIDIST_THREADS", "1")))
    except ValueError:
        return 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def generate_dataset(seed: int, model: CameraModel, cfg: SceneConfig, n_images: int, out_dir) -> Path:
    """Write ``n_images`` scenes, ``annotations.jsonl``, ``camera.json`` and ``manifest.json``."""
    check_scene_config(model, cfg)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    write_camera(model, out / "camera.json")

    def one(i):
        raster, gts = generate_scene(image_seed(seed, i), model, cfg)
        name = f"images/{i:05d}.png"
        write_raster(out / name, raster)
        return ImageRecord(name, "camera.json", gts)

    with ThreadPoolExecutor(max_workers=max_threads()) as pool:
        records = list(pool.map(one, range(n_images)))
    (out / "annotations.jsonl").write_text(write_annotations(records), encoding="utf-8")
    manifest = {
        "format_version": FORMAT_VERSION,
        "generator": "omnidist.synthetic",
        "omnidist_version": __version__,
        "seed": int(seed),
        "n_images": n_images,
        "camera": "camera.json",
        "annotations": "annotations.jsonl",
        "representation": "fisheye",
        "scene_config": asdict(cfg),
        "images": [r.image for r in records],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return out


@dataclass
class Dataset:
    root: Path
    records: list[ImageRecord]
    cameras: dict[str, CameraModel]
    representation: str = "fisheye"

    def camera_for(self, record: ImageRecord) -> CameraModel:
        return self.cameras[record.camera]


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = {}
    if (root / "manifest.json").exists():
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    ann = manifest.get("annotations", "annotations.jsonl")
    records = read_annotations((root / ann).read_text(encoding="utf-8"))
    return Dataset(root, records, resolve_cameras(records, root), manifest.get("representation", "fisheye"))
