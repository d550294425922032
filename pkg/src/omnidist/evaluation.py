"""Detection and distance metrics.

Detection quality is COCO-style: greedy confidence-ordered matching per image
and class, 101-point interpolated AP, mAP@50 and mAP@50:95 (mean over
thresholds per class, then over classes).  Distance errors are computed only
for detections matched at the IoU gate (default 0.5):

    absolute error  = mean |d - d_hat|
    weighted error  = sum c_i |d_i - d_hat_i| / sum c_i
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ValidationError
from .structures import BBox, Detection, GroundTruthObject

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_STEPS = 100
LOAF_BIN_EDGES = (0.0, 7.2, 14.4, 21.6, 28.8, 36.0)


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # corner and extent arithmetic round differently; identical boxes can land 1 ulp above 1
    return min(1.0, inter / (a.area + b.area - inter))


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_dets: list[int] = field(default_factory=list)
    unmatched_gts: list[int] = field(default_factory=list)


def _confidence_order(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthObject], iou_threshold: float) -> MatchResult:
    """Greedy one-to-one matching.

    Detections are visited by descending confidence (ties: lower index first);
    each claims the still-free ground truth of the same class with the highest
    IoU >= ``iou_threshold`` (ties: lower GT index).
    """
    taken = [False] * len(gts)
    result = MatchResult()
    for di in _confidence_order(dets):
        d = dets[di]
        best, best_iou = -1, iou_threshold
        for gi, g in enumerate(gts):
            if taken[gi] or g.class_id != d.class_id:
                continue
            v = iou(d.bbox, g.bbox)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = gi, v
        if best < 0:
            result.unmatched_dets.append(di)
        else:
            taken[best] = True
            result.pairs.append((di, best, best_iou))
    result.unmatched_gts = [gi for gi, t in enumerate(taken) if not t]
    return result


def interpolated_ap(tp_flags: Sequence[bool], n_gt: int) -> float | None:
    """101-point interpolated AP for detections already ranked by confidence."""
    if n_gt == 0:
        return None
    tp = np.asarray(tp_flags, dtype=float)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= k/100 tested as 100*tp >= k*n_gt, exact in integers; a float grid
    # misses points such as 7/10 >= 0.70 by one ulp
    grid = np.arange(RECALL_STEPS + 1) * n_gt
    idx = np.searchsorted(ctp * RECALL_STEPS, grid, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def average_precision(
    dets: Mapping[str, Sequence[Detection]],
    gts: Mapping[str, Sequence[GroundTruthObject]],
    iou_threshold: float,
    class_id: int,
) -> float | None:
    """AP of one class at one IoU threshold, pooling detections across images."""
    ranked = []
    n_gt = 0
    for order, (image, g_all) in enumerate(gts.items()):
        g = [o for o in g_all if o.class_id == class_id]
        d = [o for o in dets.get(image, ()) if o.class_id == class_id]
        n_gt += len(g)
        m = match_detections(d, g, iou_threshold)
        hit = {di for di, _, _ in m.pairs}
        ranked.extend((-d[i].confidence, order, i, i in hit) for i in range(len(d)))
    ranked.sort(key=lambda r: r[:3])
    return interpolated_ap([r[3] for r in ranked], n_gt)


def _classes(gts: Mapping[str, Sequence[GroundTruthObject]]) -> list[int]:
    return sorted({o.class_id for objs in gts.values() for o in objs})


def _mean_or_none(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def map_range(dets, gts, thresholds=IOU_THRESHOLDS):
    """Returns (map50, map50_95, {threshold: mAP})."""
    classes = _classes(gts)
    table = {c: [average_precision(dets, gts, t, c) for t in thresholds] for c in classes}
    per_threshold = {t: _mean_or_none([table[c][k] for c in classes]) for k, t in enumerate(thresholds)}
    per_class = [_mean_or_none(table[c]) for c in classes]
    i50 = list(thresholds).index(0.5) if 0.5 in thresholds else 0
    map50 = _mean_or_none([table[c][i50] for c in classes])
    return map50, _mean_or_none(per_class), per_threshold


@dataclass(frozen=True)
class DistancePair:
    confidence: float
    predicted_m: float
    true_m: float

    @property
    def error(self) -> float:
        return abs(self.true_m - self.predicted_m)


def distance_pairs(match: MatchResult, dets: Sequence[Detection], gts: Sequence[GroundTruthObject]) -> list[DistancePair]:
    """Matched pairs that carry a predicted distance."""
    out = []
    for di, gi, _ in match.pairs:
        if dets[di].distance_m is None:
            continue
        out.append(DistancePair(dets[di].confidence, dets[di].distance_m, gts[gi].distance_m))
    return out


def absolute_error(pairs: Sequence[DistancePair]) -> float | None:
    if not pairs:
        return None
    return float(sum(p.error for p in pairs) / len(pairs))


def weighted_error(pairs: Sequence[DistancePair]) -> float | None:
    wsum = sum(p.confidence for p in pairs)
    if not pairs or wsum <= 0:
        return None
    return float(sum(p.confidence * p.error for p in pairs) / wsum)


def absolute_distance_error(match, dets, gts) -> float | None:
    return absolute_error(distance_pairs(match, dets, gts))


def weighted_distance_error(match, dets, gts) -> float | None:
    return weighted_error(distance_pairs(match, dets, gts))


@dataclass(frozen=True)
class BinRow:
    lo: float
    hi: float
    weighted_error: float | None
    absolute_error: float | None
    count: int


def check_bin_edges(bin_edges) -> tuple[float, ...]:
    edges = tuple(float(e) for e in bin_edges)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ConfigError("bin edges must be strictly increasing with at least two entries")
    return edges


def binned_errors(pairs: Sequence[DistancePair], bin_edges) -> list[BinRow]:
    """Errors per ground-truth distance bin [lo, hi)."""
    edges = check_bin_edges(bin_edges)
    rows = []
    for lo, hi in zip(edges, edges[1:]):
        members = [p for p in pairs if lo <= p.true_m < hi]
        rows.append(BinRow(lo, hi, weighted_error(members), absolute_error(members), len(members)))
    return rows


@dataclass(frozen=True)
class EvalConfig:
    iou_gate: float = 0.5
    bin_edges: tuple[float, ...] | None = LOAF_BIN_EDGES

    def __post_init__(self):
        if not 0 < self.iou_gate <= 1:
            raise ConfigError("iou_gate must lie in (0, 1]")
        if self.bin_edges is not None:
            object.__setattr__(self, "bin_edges", check_bin_edges(self.bin_edges))


@dataclass
class EvalReport:
    precision: float
    recall: float
    ap_per_threshold: dict[str, float | None]
    map50: float | None
    map50_95: float | None
    absolute_error_m: float | None
    weighted_error: float | None
    bins: list[BinRow]
    n_detections: int
    n_ground_truth: int
    n_pairs: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        cols = ["row", "range_lo_m", "range_hi_m", "count", "Weighted Error", "Absolute Error (m)",
                "Precision", "Recall", "mAP@50", "mAP@50:95"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
        w.writerow(["overall", "", "", self.n_pairs, fmt(self.weighted_error), fmt(self.absolute_error_m),
                    fmt(self.precision), fmt(self.recall), fmt(self.map50), fmt(self.map50_95)])
        for b in self.bins:
            w.writerow(["bin", fmt(b.lo), fmt(b.hi), b.count, fmt(b.weighted_error), fmt(b.absolute_error),
                        "", "", "", ""])
        return buf.getvalue()


def evaluate(
    dets: Mapping[str, Sequence[Detection]],
    gts: Mapping[str, Sequence[GroundTruthObject]],
    config: EvalConfig = EvalConfig(),
) -> EvalReport:
    unknown = [k for k in dets if k not in gts]
    if unknown:
        raise ValidationError(f"detections reference images without ground truth: {unknown[:3]}")
    n_det = sum(len(v) for v in dets.values())
    n_gt = sum(len(v) for v in gts.values())
    tp = 0
    pairs: list[DistancePair] = []
    for image, g in gts.items():
        d = list(dets.get(image, ()))
        m = match_detections(d, g, config.iou_gate)
        tp += len(m.pairs)
        pairs.extend(distance_pairs(m, d, g))
    map50, map5095, per_t = map_range(dets, gts)
    bins = binned_errors(pairs, config.bin_edges) if config.bin_edges else []
    return EvalReport(
        precision=tp / n_det if n_det else 0.0,
        recall=tp / n_gt if n_gt else 0.0,
        ap_per_threshold={f"{t:.2f}": v for t, v in per_t.items()},
        map50=map50,
        map50_95=map5095,
        absolute_error_m=absolute_error(pairs),
        weighted_error=weighted_error(pairs),
        bins=bins,
        n_detections=n_det,
        n_ground_truth=n_gt,
        n_pairs=len(pairs),
    )
