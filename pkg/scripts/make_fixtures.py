"""Regenerate the committed test fixtures.

    python scripts/make_fixtures.py [--out tests/fixtures]

eval/        10-image annotation and detection documents plus the frozen report
projection/  a small synthetic fisheye scene, its camera and the equirect golden hash
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from omnidist.camera_model import default_camera, write_camera
from omnidist.data_io import (
    DetectionRecord,
    ImageRecord,
    SceneConfig,
    generate_scene,
    write_annotations,
    write_detections,
)
from omnidist.evaluation import EvalConfig, evaluate
from omnidist.projection import EquirectSpec, fisheye_to_equirect, raster_hash, write_raster
from omnidist.structures import BBox, Detection, GroundTruthObject

EVAL_SEED = 20240611
PROJ_SIDE = 96
PROJ_SPEC = {"width_px": 128, "height_px": 48}


def _jitter(rng, box: BBox, scale: float) -> BBox:
    dx, dy = rng.normal(0, scale * box.w), rng.normal(0, scale * box.h)
    sw, sh = np.exp(rng.normal(0, scale, size=2))
    return BBox(box.cx + dx, box.cy + dy, box.w * sw, box.h * sh)


def eval_fixture():
    rng = np.random.default_rng(EVAL_SEED)
    ann, det = [], []
    for i in range(10):
        gts, dets = [], []
        for _ in range(int(rng.integers(1, 5))):
            cls = int(rng.integers(0, 2))
            box = BBox(rng.uniform(40, 470), rng.uniform(40, 470), rng.uniform(12, 60), rng.uniform(12, 60))
            d = round(float(rng.uniform(0.5, 35.5)), 3)
            gts.append(GroundTruthObject(cls, box, d))
            r = rng.uniform()
            if r < 0.8:  # detected, with a box error that straddles the IoU thresholds
                dist = None if rng.uniform() < 0.1 else round(d + float(rng.normal(0, 0.1 * d + 0.3)), 3)
                conf = round(float(rng.uniform(0.3, 1.0)), 3)
                dets.append(Detection(cls, _jitter(rng, box, 0.08), conf, max(dist, 0.0) if dist else dist))
            if r > 0.9:  # duplicate detection
                dets.append(Detection(cls, _jitter(rng, box, 0.15), round(float(rng.uniform(0.05, 0.5)), 3), d))
        for _ in range(int(rng.integers(0, 3))):  # false positives
            box = BBox(rng.uniform(40, 470), rng.uniform(40, 470), rng.uniform(12, 60), rng.uniform(12, 60))
            dets.append(Detection(int(rng.integers(0, 2)), box, round(float(rng.uniform(0.05, 0.9)), 3),
                                  round(float(rng.uniform(1, 30)), 3)))
        if i == 7:
            # class 2 appears once: a confident miss ranked above an exact hit, so its AP is 0.5
            target = BBox(300.0, 120.0, 40.0, 30.0)
            gts.append(GroundTruthObject(2, target, 12.5))
            dets.append(Detection(2, BBox(60.0, 420.0, 40.0, 30.0), 0.95, 11.0))
            dets.append(Detection(2, target, 0.40, 13.0))
        name = f"images/{i:02d}.png"
        ann.append(ImageRecord(name, "camera.json", gts))
        det.append(DetectionRecord(name, dets))
    return ann, det


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "fixtures"))
    args = ap.parse_args(argv)
    out = Path(args.out)

    ev = out / "eval"
    ev.mkdir(parents=True, exist_ok=True)
    ann, det = eval_fixture()
    (ev / "annotations.jsonl").write_text(write_annotations(ann), encoding="utf-8")
    (ev / "detections.jsonl").write_text(write_detections(det), encoding="utf-8")
    report = evaluate({r.image: r.detections for r in det}, {r.image: r.objects for r in ann}, EvalConfig())
    (ev / "report.json").write_text(report.to_json(), encoding="utf-8")
    (ev / "report.csv").write_text(report.to_csv(), encoding="utf-8")

    pj = out / "projection"
    pj.mkdir(parents=True, exist_ok=True)
    model = default_camera(PROJ_SIDE)
    write_camera(model, pj / "camera.json")
    scene = SceneConfig(image_side_px=PROJ_SIDE, object_count=(2, 3), min_gap_px=2.0)
    raster, _ = generate_scene(np.random.SeedSequence([EVAL_SEED, 1]), model, scene)
    write_raster(pj / "fisheye.png", raster)
    spec = EquirectSpec(PROJ_SPEC["width_px"], PROJ_SPEC["height_px"], model.max_theta)
    eq = fisheye_to_equirect(raster, model, spec)
    golden = {"equirect": {**PROJ_SPEC, "theta_max_rad": spec.theta_max_rad}, "raster_sha256": raster_hash(eq)}
    (pj / "golden.json").write_text(json.dumps(golden, indent=2) + "\n", encoding="utf-8")
    print(f"fixtures written to {out}")


if __name__ == "__main__":
    main()
