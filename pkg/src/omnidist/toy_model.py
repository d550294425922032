"""Desk-scale detection head with a per-anchor distance output.

A linear head maps fixed per-cell image features to, for every anchor,
``tx, ty, tw, th, objectness, C class logits, distance logit``.  The optional
camera-height head maps the image-mean feature vector to one logit.  Gradients
are derived by hand; only the CIoU term uses an inner finite difference on the
four decoded box parameters (see :func:`omnidist.loss.ciou_grad`).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .camera_model import CameraModel
from .errors import ConfigError, ShapeError, TrainingDiverged
from .evaluation import iou
from .loss import LossBreakdown, LossWeights, bce_with_logits, ciou_grad, ciou_value, sigmoid, total_loss
from .normalization import ClampTally, NormalizationSpec, denormalize, normalize
from .projection import read_raster
from .structures import BBox, Detection

TW_CLAMP = 4.0
# contrast above the image median that counts as foreground mass
_FG_CONTRAST = 0.15
_LOGIT_CLIP = 0.01
PARAMS_FORMAT_VERSION = 1


@dataclass(frozen=True)
class HeadConfig:
    grid_size: int = 8
    anchors: tuple[tuple[float, float], ...] = ((16.0, 16.0),)
    num_classes: int = 1
    feature_dim: int = 16
    norm_spec: NormalizationSpec = NormalizationSpec("linear", 12.0)
    enable_height_head: bool = False
    # None picks LossWeights.default for the height-head setting
    weights: LossWeights | None = None
    learning_rate: float = 0.05
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    conf_threshold: float = 0.25
    nms_iou: float = 0.5
    h_max: float = 20.0
    val_fraction: float = 0.2
    representation: str = "fisheye"
    augment: bool = True

    def __post_init__(self):
        if self.grid_size < 4 or self.feature_dim < 4 or self.num_classes < 1:
            raise ConfigError("need grid_size >= 4, feature_dim >= 4, num_classes >= 1")
        if not self.learning_rate >= 0 or self.steps < 0 or self.batch_size < 1:
            raise ConfigError("learning_rate must be >= 0, steps >= 0, batch_size >= 1")
        anchors = tuple((float(w), float(h)) for w, h in self.anchors)
        if not anchors or any(w <= 0 or h <= 0 for w, h in anchors):
            raise ConfigError("anchors must be non-empty positive (w, h) pairs")
        object.__setattr__(self, "anchors", anchors)
        if self.representation not in ("fisheye", "equirect"):
            raise ConfigError("representation must be 'fisheye' or 'equirect'")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.weights is None:
            object.__setattr__(self, "weights", LossWeights.default(height_head=self.enable_height_head))

    @property
    def outputs(self) -> int:
        return 5 + self.num_classes + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anchors"] = [list(a) for a in self.anchors]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        d = dict(d)
        try:
            if "norm_spec" in d:
                d["norm_spec"] = NormalizationSpec(**d["norm_spec"])
            if "weights" in d:
                d["weights"] = LossWeights(**d["weights"])
            if "anchors" in d:
                d["anchors"] = tuple(tuple(a) for a in d["anchors"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class HeadParams:
    weight: np.ndarray  # (A, 5 + C + 1, F)
    bias: np.ndarray  # (A, 5 + C + 1)
    height_weight: np.ndarray | None = None  # (F,)
    height_bias: float = 0.0
    # fixed input standardisation, not trained
    feature_shift: np.ndarray | None = None
    feature_scale: np.ndarray | None = None

    def copy(self) -> "HeadParams":
        hw = None if self.height_weight is None else self.height_weight.copy()
        shift = None if self.feature_shift is None else self.feature_shift.copy()
        scale = None if self.feature_scale is None else self.feature_scale.copy()
        return HeadParams(self.weight.copy(), self.bias.copy(), hw, float(self.height_bias), shift, scale)

    def standardize(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=float)
        if x.shape[-1] != self.weight.shape[-1]:
            raise ShapeError(f"feature dim {x.shape[-1]} != head input dim {self.weight.shape[-1]}")
        if self.feature_shift is not None:
            x = x - self.feature_shift
        if self.feature_scale is not None:
            x = x / self.feature_scale
        return x

    def flat(self) -> np.ndarray:
        parts = [self.weight.ravel(), self.bias.ravel()]
        if self.height_weight is not None:
            parts += [self.height_weight, [self.height_bias]]
        return np.concatenate(parts)

    def with_flat(self, vec) -> "HeadParams":
        vec = np.asarray(vec, dtype=float)
        nw, nb = self.weight.size, self.bias.size
        out = HeadParams(vec[:nw].reshape(self.weight.shape).copy(), vec[nw:nw + nb].reshape(self.bias.shape).copy(),
                         feature_shift=self.feature_shift, feature_scale=self.feature_scale)
        if self.height_weight is not None:
            nf = self.height_weight.size
            out.height_weight = vec[nw + nb:nw + nb + nf].copy()
            out.height_bias = float(vec[nw + nb + nf])
        return out


def init_params(cfg: HeadConfig, seed: int | None = None, scale: float = 0.01) -> HeadParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    a = len(cfg.anchors)
    w = rng.normal(0.0, scale, size=(a, cfg.outputs, cfg.feature_dim))
    b = np.zeros((a, cfg.outputs))
    params = HeadParams(w, b)
    if cfg.enable_height_head:
        params.height_weight = rng.normal(0.0, scale, size=cfg.feature_dim)
    return params


def save_params(params: HeadParams, path) -> None:
    arrays = {"format_version": np.array(PARAMS_FORMAT_VERSION), "weight": params.weight, "bias": params.bias}
    if params.height_weight is not None:
        arrays["height_weight"] = params.height_weight
        arrays["height_bias"] = np.array(params.height_bias)
    if params.feature_shift is not None:
        arrays["feature_shift"] = params.feature_shift
    if params.feature_scale is not None:
        arrays["feature_scale"] = params.feature_scale
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path) -> HeadParams:
    with np.load(path) as z:
        version = int(z["format_version"])
        if version != PARAMS_FORMAT_VERSION:
            raise ConfigError(f"unsupported params format version {version}")
        hw = z["height_weight"] if "height_weight" in z else None
        hb = float(z["height_bias"]) if "height_bias" in z else 0.0
        shift = z["feature_shift"] if "feature_shift" in z else None
        scale = z["feature_scale"] if "feature_scale" in z else None
        return HeadParams(z["weight"], z["bias"], hw, hb, shift, scale)


# --------------------------------------------------------------------------
# features


FEATURE_NAMES_GRAY = (
    "mean", "std", "grad_u", "grad_v", "radial", "sin_azimuth", "cos_azimuth",
    "fg_mass", "logit_offset_u", "logit_offset_v", "abs_offset_u", "abs_offset_v",
    "log_extent_w", "log_extent_h", "extent_radial", "extent_radial_sq",
)


def _as_float_image(image) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(float) / 255.0
    else:
        img = img.astype(float)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3:
        raise ShapeError("image must be HxW or HxWxC")
    return img


def _cell_geometry(side: int, cfg: HeadConfig, model: CameraModel | None):
    s = cfg.grid_size
    cs = side / s
    centers = (np.arange(s) + 0.5) * cs
    cu, cv = np.meshgrid(centers, centers)  # cu varies along columns
    if cfg.representation == "equirect":
        radial = cv / side
        phi = -math.pi + 2 * math.pi * cu / side
    else:
        pu, pv = model.principal_point if model is not None else (side / 2, side / 2)
        radial = np.hypot(cu - pu, cv - pv) / (side / math.sqrt(2))
        phi = np.arctan2(cv - pv, cu - pu)
    return radial, np.sin(phi), np.cos(phi)


def _logit_offset(offset: np.ndarray) -> np.ndarray:
    """Offset from the cell centre mapped to the logit of its in-cell fraction."""
    q = np.clip(offset + 0.5, _LOGIT_CLIP, 1 - _LOGIT_CLIP)
    return np.log(q / (1 - q))


def extract_features(image, cfg: HeadConfig, model: CameraModel | None = None) -> np.ndarray:
    """S x S x F grid of per-cell features.

    Order: per-channel patch means, per-channel patch standard deviations,
    mean |d/du| and |d/dv| of the luminance, radial distance of the cell centre
    from the principal point (over half the image diagonal), sin and cos of its
    azimuth.  Then a foreground block: pixels whose luminance differs from the
    image median by more than 0.15 form connected blobs, and each cell
    describes the blob covering most of it: foreground fraction of the cell,
    logit of the blob centre's fractional position in the cell (u, v), absolute
    centre offset from the cell centre (u, v), log blob width and height, and
    the blob centre's radial distance and its square.  Offsets and sizes are in
    cell units; a cell without foreground gets zero offsets and a one-pixel
    size.  The vector is zero-padded or truncated to ``cfg.feature_dim``.

    For equirectangular inputs the radial slot holds the normalised row and the
    azimuth is that of the column.
    """
    img = _as_float_image(image)
    h, w, ch = img.shape
    s = cfg.grid_size
    if h != w or h % s:
        raise ShapeError(f"image must be square with side divisible by {s}, got {h}x{w}")
    cs = h // s
    blocks = img.reshape(s, cs, s, cs, ch)
    means = blocks.mean(axis=(1, 3))
    stds = blocks.std(axis=(1, 3))
    lum = img.mean(axis=2)
    gv, gu = np.gradient(lum)
    gx = np.abs(gu).reshape(s, cs, s, cs).mean(axis=(1, 3))
    gy = np.abs(gv).reshape(s, cs, s, cs).mean(axis=(1, 3))
    radial, sphi, cphi = _cell_geometry(h, cfg, model)

    # foreground blobs: cells describe the connected component covering most of them
    contrast = np.abs(lum - np.median(lum))
    fg = contrast > _FG_CONTRAST
    if model is not None and cfg.representation == "fisheye":
        # the unlit area outside the image circle is not foreground
        c = np.arange(h) + 0.5
        rr = np.hypot(c[None, :] - model.principal_point[0], c[:, None] - model.principal_point[1])
        fg &= rr <= model.max_radius_px
    labels, n = ndimage.label(fg)
    cell_mass = fg.reshape(s, cs, s, cs).mean(axis=(1, 3))
    eu = np.zeros((s, s))
    ev = np.zeros((s, s))
    ew = np.full((s, s), 1.0 / cs)
    eh = np.full((s, s), 1.0 / cs)
    if n:
        slices = ndimage.find_objects(labels)
        blocks_l = labels.reshape(s, cs, s, cs).transpose(0, 2, 1, 3).reshape(s, s, -1)
        for i in range(s):
            for j in range(s):
                counts = np.bincount(blocks_l[i, j], minlength=n + 1)
                counts[0] = 0
                if counts.max() == 0:
                    continue
                ys, xs = slices[int(np.argmax(counts)) - 1]
                eu[i, j] = (xs.start + xs.stop) / 2 / cs - (j + 0.5)
                ev[i, j] = (ys.start + ys.stop) / 2 / cs - (i + 0.5)
                ew[i, j] = (xs.stop - xs.start) / cs
                eh[i, j] = (ys.stop - ys.start) / cs

    # radial position of the extent centre, same scale as ``radial``
    if cfg.representation == "equirect":
        e_radial = radial + ev / s
    else:
        pu, pv = model.principal_point if model is not None else (h / 2, h / 2)
        cu = (np.arange(s)[None, :] + 0.5 + eu) * cs
        cv = (np.arange(s)[:, None] + 0.5 + ev) * cs
        e_radial = np.hypot(cu - pu, cv - pv) / (h / math.sqrt(2))

    feats = [means[..., c] for c in range(ch)] + [stds[..., c] for c in range(ch)]
    feats += [gx, gy, radial, sphi, cphi, cell_mass, _logit_offset(eu), _logit_offset(ev),
              np.abs(eu), np.abs(ev), np.log(ew), np.log(eh), e_radial, e_radial**2]
    grid = np.stack(feats, axis=-1)
    f = cfg.feature_dim
    if grid.shape[-1] >= f:
        return grid[..., :f]
    return np.concatenate([grid, np.zeros((s, s, f - grid.shape[-1]))], axis=-1)


# --------------------------------------------------------------------------
# head


def forward(params: HeadParams, features) -> np.ndarray:
    """Affine map per cell: (..., F) -> (..., A, 5 + C + 1).

    Features pass through the params' fixed standardisation (identity when
    unset) before ``W f + b``.
    """
    x = params.standardize(features)
    return np.einsum("...f,akf->...ak", x, params.weight) + params.bias


def height_logit(params: HeadParams, features) -> np.ndarray:
    x = params.standardize(features)
    pooled = x.reshape(*x.shape[:-3], -1, x.shape[-1]).mean(axis=-2)
    return pooled @ params.height_weight + params.height_bias


def decode_boxes(raw: np.ndarray, cfg: HeadConfig, image_side: float) -> np.ndarray:
    """Box parameters (cx, cy, w, h) for raw outputs of shape (..., S, S, A, K)."""
    s = cfg.grid_size
    cs = image_side / s
    j = np.arange(s)[None, :, None]
    i = np.arange(s)[:, None, None]
    anchors = np.asarray(cfg.anchors)
    cx = (j + sigmoid(raw[..., 0])) * cs
    cy = (i + sigmoid(raw[..., 1])) * cs
    w = anchors[:, 0] * np.exp(np.clip(raw[..., 2], -TW_CLAMP, TW_CLAMP))
    h = anchors[:, 1] * np.exp(np.clip(raw[..., 3], -TW_CLAMP, TW_CLAMP))
    return np.stack([cx, cy, w, h], axis=-1)


def suppress(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy same-class suppression keeping the higher-confidence box."""
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].confidence, k))
    kept: list[Detection] = []
    for k in order:
        d = dets[k]
        if all(o.class_id != d.class_id or iou(o.bbox, d.bbox) <= iou_threshold for o in kept):
            kept.append(d)
    return kept


def decode(raw, cfg: HeadConfig, image_side: float) -> list[Detection]:
    """Detections from one image's raw outputs (S, S, A, K).

    A detection is kept only if its confidence is strictly above
    ``cfg.conf_threshold``.
    """
    raw = np.asarray(raw, dtype=float)
    c = cfg.num_classes
    boxes = decode_boxes(raw, cfg, image_side)
    obj = sigmoid(raw[..., 4])
    cls = sigmoid(raw[..., 5:5 + c])
    best = np.argmax(cls, axis=-1)
    conf = obj * np.take_along_axis(cls, best[..., None], axis=-1)[..., 0]
    y = sigmoid(raw[..., 5 + c])
    y = np.maximum(y, cfg.norm_spec.y_min)
    dist = denormalize(cfg.norm_spec, y)
    dist = np.minimum(dist, cfg.norm_spec.d_max)
    dets = []
    for idx in zip(*np.nonzero(conf > cfg.conf_threshold)):
        b = boxes[idx]
        dets.append(Detection(int(best[idx]), BBox(*b), float(conf[idx]), float(dist[idx])))
    return suppress(dets, cfg.nms_iou)


# --------------------------------------------------------------------------
# targets


@dataclass
class Targets:
    obj: np.ndarray  # (S, S, A) 0/1
    cls: np.ndarray  # (S, S, A) int, -1 for negatives
    box: np.ndarray  # (S, S, A, 4)
    dist_m: np.ndarray  # (S, S, A)
    gt_index: np.ndarray  # (S, S, A) int, -1 for negatives
    height_m: float | None = None


def _anchor_for(box: BBox, anchors) -> int:
    scores = []
    for aw, ah in anchors:
        inter = min(aw, box.w) * min(ah, box.h)
        scores.append(inter / (aw * ah + box.w * box.h - inter))
    return int(np.argmax(scores))


def assign_targets(gts, cfg: HeadConfig, image_side: float, height_m: float | None = None) -> Targets:
    """Assign each GT to the cell containing its box centre.

    Conflicts on a (cell, anchor) slot keep the GT with the smaller distance,
    then the smaller index.
    """
    s, a = cfg.grid_size, len(cfg.anchors)
    cs = image_side / s
    t = Targets(np.zeros((s, s, a)), np.full((s, s, a), -1), np.zeros((s, s, a, 4)),
                np.zeros((s, s, a)), np.full((s, s, a), -1), height_m)
    for k, g in enumerate(gts):
        j = min(max(int(g.bbox.cx // cs), 0), s - 1)
        i = min(max(int(g.bbox.cy // cs), 0), s - 1)
        an = _anchor_for(g.bbox, cfg.anchors)
        prev = t.gt_index[i, j, an]
        if prev >= 0 and gts[prev].distance_m <= g.distance_m:
            continue
        t.obj[i, j, an] = 1.0
        t.cls[i, j, an] = g.class_id
        t.box[i, j, an] = g.bbox.as_list()
        t.dist_m[i, j, an] = g.distance_m
        t.gt_index[i, j, an] = k
    return t


def distance_targets(spec: NormalizationSpec, dist_m, tally: ClampTally | None = None) -> np.ndarray:
    """Normalised targets clamped to the sigmoid range [0, 1]."""
    y = np.asarray(normalize(spec, dist_m, tally), dtype=float)
    low = y < 0
    if tally is not None:
        tally.count += int(np.count_nonzero(low))
    return np.clip(y, 0.0, 1.0)


# --------------------------------------------------------------------------
# objective


@dataclass
class Batch:
    features: np.ndarray  # (B, S, S, F)
    targets: list[Targets]
    image_side: float


def loss_and_grad(params: HeadParams, batch: Batch, cfg: HeadConfig):
    """Full objective and its gradient with respect to ``params``."""
    x = params.standardize(batch.features)
    bsz = x.shape[0]
    if bsz == 0:
        raise ShapeError("empty batch")
    raw = np.einsum("...f,akf->...ak", x, params.weight) + params.bias  # (B, S, S, A, K)
    k_dist = 5 + cfg.num_classes
    c = cfg.num_classes
    w = cfg.weights
    g = np.zeros_like(raw)

    obj_t = np.stack([t.obj for t in batch.targets])
    n_all = obj_t.size
    v, gr = bce_with_logits(raw[..., 4], obj_t)
    l_obj = float(v.sum() / n_all)
    g[..., 4] = w.lambda_obj * gr / n_all

    pos = obj_t > 0
    n_pos = int(pos.sum())
    l_cls = l_loc = l_dist = 0.0
    if n_pos:
        cls_t = np.stack([t.cls for t in batch.targets])[pos]
        onehot = np.zeros((n_pos, c))
        onehot[np.arange(n_pos), cls_t] = 1.0
        rp = raw[pos]
        v, gr = bce_with_logits(rp[:, 5:5 + c], onehot)
        l_cls = float(v.sum() / (n_pos * c))
        g_pos = np.zeros_like(rp)
        g_pos[:, 5:5 + c] = w.lambda_cls * gr / (n_pos * c)

        boxes = decode_boxes(raw, cfg, batch.image_side)[pos]
        gt_box = np.stack([t.box for t in batch.targets])[pos]
        l_loc = float(np.mean(1.0 - ciou_value(boxes, gt_box)))
        gb = -w.lambda_loc * ciou_grad(boxes, gt_box) / n_pos
        cs = batch.image_side / cfg.grid_size
        sx, sy = sigmoid(rp[:, 0]), sigmoid(rp[:, 1])
        g_pos[:, 0] = gb[:, 0] * cs * sx * (1 - sx)
        g_pos[:, 1] = gb[:, 1] * cs * sy * (1 - sy)
        g_pos[:, 2] = gb[:, 2] * boxes[:, 2] * (np.abs(rp[:, 2]) < TW_CLAMP)
        g_pos[:, 3] = gb[:, 3] * boxes[:, 3] * (np.abs(rp[:, 3]) < TW_CLAMP)

        y_t = distance_targets(cfg.norm_spec, np.stack([t.dist_m for t in batch.targets])[pos])
        sd = sigmoid(rp[:, k_dist])
        diff = sd - y_t
        l_dist = float(np.abs(diff).sum() / n_pos)
        g_pos[:, k_dist] = w.lambda_dist * np.sign(diff) * sd * (1 - sd) / n_pos
        g[pos] += g_pos

    grad = HeadParams(
        np.einsum("bijak,bijf->akf", g, x),
        g.sum(axis=(0, 1, 2)),
    )
    l_h = None
    if cfg.enable_height_head:
        h_t = np.array([t.height_m for t in batch.targets], dtype=float) / cfg.h_max
        pooled = x.reshape(bsz, -1, x.shape[-1]).mean(axis=1)
        sh = sigmoid(pooled @ params.height_weight + params.height_bias)
        diff = sh - np.clip(h_t, 0.0, 1.0)
        l_h = float(np.abs(diff).sum() / bsz)
        gh = w.lambda_ad * np.sign(diff) * sh * (1 - sh) / bsz
        grad.height_weight = gh @ pooled
        grad.height_bias = float(gh.sum())
    elif params.height_weight is not None:
        grad.height_weight = np.zeros_like(params.height_weight)
        grad.height_bias = 0.0
    return total_loss(w, l_obj, l_cls, l_loc, l_dist, l_h), grad


# --------------------------------------------------------------------------
# data preparation and training


def dihedral_point(u, v, side, k, flip):
    """Map pixel coordinates through a horizontal flip (optional) then k quarter turns."""
    if flip:
        u = side - u
    for _ in range(k % 4):
        u, v = v, side - u
    return u, v


def dihedral_image(image: np.ndarray, k: int, flip: bool) -> np.ndarray:
    out = np.fliplr(image) if flip else image
    return np.ascontiguousarray(np.rot90(out, k))


def dihedral_box(box: BBox, side: float, k: int, flip: bool) -> BBox:
    cx, cy = dihedral_point(box.cx, box.cy, side, k, flip)
    w, h = (box.h, box.w) if k % 2 else (box.w, box.h)
    return BBox(cx, cy, w, h)


def dihedral_model(model: CameraModel | None, side: float, k: int, flip: bool):
    if model is None:
        return None
    pu, pv = dihedral_point(*model.principal_point, side, k, flip)
    return replace(model, principal_point=(pu, pv))


def augmentations(cfg: HeadConfig) -> list[tuple[int, bool]]:
    if not cfg.augment:
        return [(0, False)]
    if cfg.representation == "equirect":
        return [(0, False), (0, True)]
    return [(k, f) for f in (False, True) for k in range(4)]


@dataclass
class Example:
    features: np.ndarray
    targets: Targets


def prepare_example(image, gts, cfg: HeadConfig, model, k=0, flip=False, height_m=None) -> Example:
    side = image.shape[0]
    img = dihedral_image(image, k, flip)
    objs = [replace(g, bbox=dihedral_box(g.bbox, side, k, flip)) for g in gts]
    m = dihedral_model(model, side, k, flip) if cfg.representation == "fisheye" else model
    return Example(extract_features(img, cfg, m), assign_targets(objs, cfg, side, height_m))


def split_indices(n: int, cfg: HeadConfig) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([cfg.seed, 7]).permutation(n)
    n_val = int(round(n * cfg.val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def distance_mae(params: HeadParams, examples: list[Example], cfg: HeadConfig) -> float | None:
    """Mean |predicted - true| distance (m) at the cells GTs are assigned to."""
    if not examples:
        return None
    x = np.stack([e.features for e in examples])
    raw = forward(params, x)[..., 5 + cfg.num_classes]
    pos = np.stack([e.targets.obj for e in examples]) > 0
    if not pos.any():
        return None
    y = np.maximum(sigmoid(raw[pos]), cfg.norm_spec.y_min)
    pred = denormalize(cfg.norm_spec, y)
    true = np.stack([e.targets.dist_m for e in examples])[pos]
    return float(np.mean(np.abs(pred - true)))


def feature_statistics(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and standard deviation (1 for constant features)."""
    shift = rows.mean(axis=0)
    scale = rows.std(axis=0)
    return shift, np.where(scale > 1e-8, scale, 1.0)


@dataclass
class TrainResult:
    params: HeadParams
    history: list[LossBreakdown]
    val_mae: list[float | None]
    initial_val_mae: float | None
    train_indices: np.ndarray
    val_indices: np.ndarray


def load_images(dataset) -> list[np.ndarray]:
    return [read_raster(Path(dataset.root) / r.image) for r in dataset.records]


def train(dataset, cfg: HeadConfig, images=None, params: HeadParams | None = None, progress=None) -> TrainResult:
    """Plain SGD with a fixed learning rate; deterministic in ``cfg.seed``.

    ``dataset`` is a :class:`omnidist.data_io.Dataset`.  Fisheye inputs are
    augmented with the 8 flips/quarter turns, equirectangular inputs with
    horizontal flips only.
    """
    if images is None:
        images = load_images(dataset)
    records = dataset.records
    cams = [dataset.camera_for(r) for r in records]
    tr, va = split_indices(len(records), cfg)
    if len(tr) == 0:
        raise ConfigError("training split is empty")
    augs = augmentations(cfg)
    train_ex = [[prepare_example(images[i], records[i].objects, cfg, cams[i], k, f, cams[i].height_m)
                 for (k, f) in augs] for i in tr]
    val_ex = [prepare_example(images[i], records[i].objects, cfg, cams[i], height_m=cams[i].height_m) for i in va]
    side = float(images[tr[0]].shape[0])

    if params is None:
        params = init_params(cfg)
        stacked = np.stack([e.features for row in train_ex for e in row]).reshape(-1, cfg.feature_dim)
        params.feature_shift, params.feature_scale = feature_statistics(stacked)
    else:
        params = params.copy()
    rng = np.random.default_rng([cfg.seed, 11])
    history, maes = [], []
    initial = distance_mae(params, val_ex, cfg)
    for step in range(cfg.steps):
        idx = rng.integers(len(tr), size=cfg.batch_size)
        aug = rng.integers(len(augs), size=cfg.batch_size)
        chosen = [train_ex[i][a] for i, a in zip(idx, aug)]
        batch = Batch(np.stack([e.features for e in chosen]), [e.targets for e in chosen], side)
        loss, grad = loss_and_grad(params, batch, cfg)
        if not math.isfinite(loss.total):
            raise TrainingDiverged(step)
        params.weight -= cfg.learning_rate * grad.weight
        params.bias -= cfg.learning_rate * grad.bias
        if params.height_weight is not None:
            params.height_weight -= cfg.learning_rate * grad.height_weight
            params.height_bias -= cfg.learning_rate * grad.height_bias
        if not (np.all(np.isfinite(params.weight)) and np.all(np.isfinite(params.bias))):
            raise TrainingDiverged(step)
        history.append(loss)
        maes.append(distance_mae(params, val_ex, cfg))
        if progress is not None:
            progress(step, loss)
    return TrainResult(params, history, maes, initial, tr, va)


def predict(params: HeadParams, image, cfg: HeadConfig, model: CameraModel | None = None):
    """(detections, camera-height estimate in metres or None)."""
    img = np.asarray(image)
    feats = extract_features(img, cfg, model)
    dets = decode(forward(params, feats), cfg, img.shape[0])
    height = None
    if cfg.enable_height_head and params.height_weight is not None:
        height = float(sigmoid(height_logit(params, feats)) * cfg.h_max)
    return dets, height


def read_config(path) -> tuple[HeadConfig, dict]:
    """Training-config JSON: HeadConfig fields under "head", plus free-form extras."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return HeadConfig.from_dict(doc.get("head", {})), doc
