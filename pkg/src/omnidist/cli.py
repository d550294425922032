"""Command-line entry point.

    omnidist geodist    --camera CAM --detections DETS --out DIR
    omnidist project    --camera CAM (--image IMG | --dataset DIR) --out DIR
    omnidist synth      --n N --out DIR
    omnidist train      --dataset DIR --out DIR
    omnidist eval       (--annotations ANN --detections DETS | --dataset DIR --params NPZ) --out DIR
    omnidist robustness --dataset DIR --out DIR [--params NPZ]

Every command accepts ``--config PATH`` (JSON, one section per concern:
"scene", "camera", "head", "eval", "equirect", "robustness") and ``--seed N``.
Outputs are staged next to ``--out`` and moved into place only when the run
succeeds, together with a ``manifest.json`` recording config, seed, package
versions and input hashes.
"""

from __future__ import annotations

import argparse
import json
import math
import platform
import shutil
import sys
import tempfile
from dataclasses import asdict
from importlib import metadata
from pathlib import Path

from . import __version__
from .camera_model import default_camera, ground_xy, read_camera, write_camera
from .data_io import (
    DetectionRecord,
    ImageRecord,
    SceneConfig,
    generate_dataset,
    load_dataset,
    read_annotations,
    read_detections,
    sha256_file,
    write_detections,
)
from .errors import ConfigError, OmnidistError, OutOfCalibrationRange
from .evaluation import EvalConfig, evaluate
from .projection import EquirectSpec, bbox_to_equirect, fisheye_to_equirect, raster_hash, read_raster, write_raster
from .robustness import Perturbation, contact_pixel, plot_svg, run_robustness, shift_x
from .structures import Detection

CONFIG_SECTIONS = ("scene", "camera", "head", "eval", "equirect", "robustness")
DEFAULT_PERTURBATIONS = [{"label": "shift 0px"}, {"label": "shift 1px", "shift_px": [1, 0]},
                         {"label": "shift 5px", "shift_px": [5, 0]}]


class _Run:
    """Staging area for one command's outputs plus its manifest."""

    def __init__(self, args, config: dict):
        self.out = Path(args.out)
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.partial-", dir=self.out.parent))
        self.inputs: dict[str, str] = {}
        self.manifest = {
            "command": args.command,
            "argv": sys.argv[1:],
            "seed": args.seed,
            "config": config,
            "versions": _versions(),
        }

    def path(self, name: str) -> Path:
        p = self.stage / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_text(self, name: str, text: str) -> None:
        self.path(name).write_text(text, encoding="utf-8")

    def record_input(self, path) -> None:
        p = Path(path)
        if p.is_file():
            self.inputs[str(p)] = sha256_file(p)

    def commit(self, **extra) -> None:
        # a dataset manifest written by the command itself is kept and extended
        existing = self.stage / "manifest.json"
        if existing.exists():
            self.manifest = {**json.loads(existing.read_text(encoding="utf-8")), **self.manifest}
        self.manifest.update(extra)
        self.manifest["inputs"] = dict(sorted(self.inputs.items()))
        self.manifest["outputs"] = sorted(str(p.relative_to(self.stage)) for p in self.stage.rglob("*") if p.is_file())
        self.write_text("manifest.json", json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")
        self.out.mkdir(parents=True, exist_ok=True)
        for p in sorted(self.stage.rglob("*")):
            if p.is_file():
                dest = self.out / p.relative_to(self.stage)
                dest.parent.mkdir(parents=True, exist_ok=True)
                shutil.move(str(p), dest)
        shutil.rmtree(self.stage, ignore_errors=True)

    def abort(self) -> None:
        shutil.rmtree(self.stage, ignore_errors=True)


def _versions() -> dict:
    out = {"omnidist": __version__, "python": platform.python_version()}
    for pkg in ("numpy", "scipy", "Pillow", "matplotlib"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc.msg} (line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(CONFIG_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    return doc


def _section(config: dict, name: str) -> dict:
    sec = config.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return sec


def _require_file(path, what):
    if path is None or not Path(path).exists():
        raise ConfigError(f"{what} not found: {path}")
    return Path(path)


def _head_config(config: dict, seed):
    from .toy_model import HeadConfig

    head = dict(_section(config, "head"))
    if seed is not None:
        head["seed"] = seed
    return HeadConfig.from_dict(head)


# --------------------------------------------------------------------------
# commands: each validates first, then works inside a _Run


def cmd_geodist(args, config):
    cam_path = _require_file(args.camera, "camera")
    det_path = _require_file(args.detections, "detections")
    model = read_camera(cam_path)
    records = read_detections(det_path.read_text(encoding="utf-8"))
    run = _Run(args, config)
    try:
        run.record_input(cam_path)
        run.record_input(det_path)
        flagged, out_records = [], []
        for rec in records:
            dets = []
            for i, d in enumerate(rec.detections):
                u, v = contact_pixel(d.bbox)
                try:
                    xy = ground_xy(model, (u, v))
                    dist = float(math.hypot(xy[0], xy[1]))
                except OutOfCalibrationRange:
                    dist = float("nan")
                if not math.isfinite(dist):
                    flagged.append({"image": rec.image, "index": i})
                    dist = None
                dets.append(Detection(d.class_id, d.bbox, d.confidence, dist))
            out_records.append(DetectionRecord(rec.image, dets))
        run.write_text("detections.jsonl", write_detections(out_records))
        summary = {"n_detections": sum(len(r.detections) for r in records), "n_flagged": len(flagged),
                   "flagged": flagged}
        run.write_text("summary.json", json.dumps(summary, indent=2) + "\n")
        run.commit()
    except BaseException:
        run.abort()
        raise
    print(f"geodist: {summary['n_detections']} detections, {summary['n_flagged']} flagged")


def _equirect_spec(config, model) -> EquirectSpec:
    sec = _section(config, "equirect")
    try:
        return EquirectSpec(int(sec.get("width_px", 512)), int(sec.get("height_px", 128)),
                            float(sec.get("theta_max_rad", model.max_theta)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"equirect: {exc}") from None


def cmd_project(args, config):
    cam_path = _require_file(args.camera, "camera")
    model = read_camera(cam_path)
    spec = _equirect_spec(config, model)
    if (args.image is None) == (args.dataset is None):
        raise ConfigError("project needs exactly one of --image or --dataset")
    run = _Run(args, config)
    try:
        run.record_input(cam_path)
        if args.image is not None:
            img_path = _require_file(args.image, "image")
            run.record_input(img_path)
            eq = fisheye_to_equirect(read_raster(img_path), model, spec)
            write_raster(run.path("equirect.png"), eq)
            run.commit(raster_sha256=raster_hash(eq))
            print(f"project: {raster_hash(eq)}")
            return
        ds = load_dataset(_require_file(args.dataset, "dataset"))
        out_records, wrapped = [], 0
        for rec in ds.records:
            src = Path(ds.root) / rec.image
            run.record_input(src)
            eq = fisheye_to_equirect(read_raster(src), model, spec)
            write_raster(run.path(rec.image), eq)
            objs = []
            for o in rec.objects:
                box = bbox_to_equirect(model, spec, o.bbox)
                wrapped += box.wraps
                objs.append(type(o)(o.class_id, box, o.distance_m))
            out_records.append(ImageRecord(rec.image, "camera.json", objs))
        run.write_text("annotations.jsonl", _annotations_with_wraps(out_records))
        write_camera(model, run.path("camera.json"))
        run.commit(n_images=len(out_records), n_wrapped=wrapped, representation="equirect",
                   annotations="annotations.jsonl", equirect=asdict(spec))
    except BaseException:
        run.abort()
        raise
    print(f"project: {len(out_records)} images, {wrapped} wrapped boxes")


def _annotations_with_wraps(records) -> str:
    lines = []
    for r in records:
        objs = []
        for o in r.objects:
            entry = {"class_id": o.class_id, "bbox": o.bbox.as_list(), "distance_m": o.distance_m}
            if o.bbox.wraps:
                entry["wraps"] = True
            objs.append(entry)
        lines.append(json.dumps({"image": r.image, "camera": r.camera, "objects": objs}))
    return "".join(line + "\n" for line in lines)


def _camera_from_config(config, side: int):
    sec = _section(config, "camera")
    if "path" in sec:
        return read_camera(_require_file(sec["path"], "camera"))
    try:
        return default_camera(side, height_m=float(sec.get("height_m", 2.5)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"camera: {exc}") from None


def cmd_synth(args, config):
    if args.n is None or args.n < 1:
        raise ConfigError("synth needs --n >= 1")
    try:
        scene = SceneConfig.from_dict(_section(config, "scene"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scene: {exc}") from None
    model = _camera_from_config(config, scene.image_side_px)
    seed = 0 if args.seed is None else args.seed
    run = _Run(args, config)
    try:
        generate_dataset(seed, model, scene, args.n, run.stage)
        run.commit(seed=seed)
    except BaseException:
        run.abort()
        raise
    print(f"synth: {args.n} scenes")


def cmd_train(args, config):
    from .toy_model import save_params, train

    cfg = _head_config(config, args.seed)
    ds = load_dataset(_require_file(args.dataset, "dataset"))
    run = _Run(args, config)
    try:
        for rec in ds.records:
            run.record_input(Path(ds.root) / rec.image)
        run.record_input(Path(ds.root) / "annotations.jsonl")
        res = train(ds, cfg)
        save_params(res.params, run.path("params.npz"))
        rows = ["step,obj,cls,loc,dist,camera_height,total,val_mae_m"]
        for i, (lb, mae) in enumerate(zip(res.history, res.val_mae)):
            rows.append(",".join(map(repr, (i, lb.obj, lb.cls, lb.loc, lb.dist, lb.camera_height, lb.total, mae))))
        run.write_text("history.csv", "\n".join(rows) + "\n")
        summary = {"initial_val_mae_m": res.initial_val_mae,
                   "final_val_mae_m": res.val_mae[-1] if res.val_mae else res.initial_val_mae,
                   "steps": cfg.steps, "train_images": len(res.train_indices), "val_images": len(res.val_indices)}
        run.write_text("summary.json", json.dumps(summary, indent=2) + "\n")
        run.write_text("head_config.json", json.dumps({"head": cfg.to_dict()}, indent=2) + "\n")
        run.commit(seed=cfg.seed, head=cfg.to_dict())
    except BaseException:
        run.abort()
        raise
    print(f"train: val MAE {summary['initial_val_mae_m']:.3f} -> {summary['final_val_mae_m']:.3f} m")


def _eval_config(config) -> EvalConfig:
    sec = dict(_section(config, "eval"))
    try:
        return EvalConfig(**sec)
    except TypeError as exc:
        raise ConfigError(f"eval: {exc}") from None


def _predict_split(ds, params, cfg, split):
    from .toy_model import load_images, predict, split_indices

    idx = range(len(ds.records))
    if split != "all":
        tr, va = split_indices(len(ds.records), cfg)
        idx = va if split == "val" else tr
    images = load_images(ds)
    dets, gts = {}, {}
    for i in idx:
        rec = ds.records[i]
        dets[rec.image], _ = predict(params, images[i], cfg, ds.camera_for(rec))
        gts[rec.image] = rec.objects
    return dets, gts


def cmd_eval(args, config):
    ecfg = _eval_config(config)
    if args.dataset is not None:
        from .toy_model import load_params

        cfg = _head_config(config, args.seed)
        ds = load_dataset(_require_file(args.dataset, "dataset"))
        params = load_params(_require_file(args.params, "params"))
        inputs = [Path(args.params), Path(ds.root) / "annotations.jsonl"]
        dets, gts = _predict_split(ds, params, cfg, args.split)
    else:
        ann_path = _require_file(args.annotations, "annotations")
        det_path = _require_file(args.detections, "detections")
        gts = {r.image: r.objects for r in read_annotations(ann_path.read_text(encoding="utf-8"))}
        dets = {r.image: r.detections for r in read_detections(det_path.read_text(encoding="utf-8"))}
        inputs = [ann_path, det_path]
    run = _Run(args, config)
    try:
        for p in inputs:
            run.record_input(p)
        report = evaluate(dets, gts, ecfg)
        run.write_text("report.json", report.to_json())
        run.write_text("report.csv", report.to_csv())
        run.commit()
    except BaseException:
        run.abort()
        raise
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"  # noqa: E731
    print(f"eval: mAP@50 {fmt(report.map50)}  abs err {fmt(report.absolute_error_m)} m")


def _perturbations(config):
    sec = _section(config, "robustness")
    raw = sec.get("perturbations", DEFAULT_PERTURBATIONS)
    if not isinstance(raw, list) or not raw:
        raise ConfigError("robustness.perturbations must be a non-empty list")
    out = []
    for item in raw:
        if isinstance(item, (int, float)):
            out.append(shift_x(float(item)))
        elif isinstance(item, dict):
            out.append(Perturbation.from_dict(item))
        else:
            raise ConfigError("perturbations are numbers (x shifts) or objects")
    labels = [p.label for p in out]
    if len(set(labels)) != len(labels):
        raise ConfigError("perturbation labels must be unique")
    far = sec.get("far_bin")
    if far is not None and (not isinstance(far, list) or len(far) != 2):
        raise ConfigError("robustness.far_bin must be [lo, hi]")
    return out, (tuple(float(x) for x in far) if far else None)


def cmd_robustness(args, config):
    perts, far_bin = _perturbations(config)
    ds = load_dataset(_require_file(args.dataset, "dataset"))
    toy = None
    if args.params is not None:
        from .toy_model import load_params

        toy = (load_params(_require_file(args.params, "params")), _head_config(config, args.seed))
    run = _Run(args, config)
    try:
        run.record_input(Path(ds.root) / "annotations.jsonl")
        if args.params is not None:
            run.record_input(args.params)
        report = run_robustness(ds, perts, far_bin=far_bin, toy=toy)
        run.write_text("robustness.json", report.to_json())
        run.write_text("robustness.csv", report.to_csv())
        plot_svg(report, run.path("robustness.svg"))
        run.commit()
    except BaseException:
        run.abort()
        raise
    for r in report.rows:
        d = "n/a" if r.delta_m is None else f"{r.delta_m:+.4f}"
        fd = "n/a" if r.far_delta_m is None else f"{r.far_delta_m:+.4f}"
        print(f"robustness: {r.label}: delta {d} m, far delta {fd} m")


COMMANDS = {
    "geodist": cmd_geodist,
    "project": cmd_project,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "robustness": cmd_robustness,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omnidist", description="Fisheye object-distance toolkit")
    parser.add_argument("--version", action="version", version=f"omnidist {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--out", required=True, help="output directory")
        return p

    p = common(sub.add_parser("geodist", help="geometric distances for detections"))
    p.add_argument("--camera", required=True)
    p.add_argument("--detections", required=True)

    p = common(sub.add_parser("project", help="fisheye to equirectangular re-projection"))
    p.add_argument("--camera", required=True)
    p.add_argument("--image")
    p.add_argument("--dataset")

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    p.add_argument("--n", type=int, required=True, help="number of scenes")

    p = common(sub.add_parser("train", help="train the toy head"))
    p.add_argument("--dataset", required=True)

    p = common(sub.add_parser("eval", help="evaluate detections against annotations"))
    p.add_argument("--annotations")
    p.add_argument("--detections")
    p.add_argument("--dataset")
    p.add_argument("--params")
    p.add_argument("--split", choices=("val", "train", "all"), default="val")

    p = common(sub.add_parser("robustness", help="calibration perturbation experiment"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--params")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        if args.command == "eval" and args.dataset is None and (args.annotations is None or args.detections is None):
            raise ConfigError("eval needs --annotations and --detections, or --dataset and --params")
        if args.command == "eval" and args.dataset is not None and args.params is None:
            raise ConfigError("eval on a dataset needs --params")
        COMMANDS[args.command](args, config)
    except (OmnidistError, ValueError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"omnidist {args.command}: error: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, (ConfigError, ValueError)) else 1
    except OSError as exc:
        print(f"omnidist {args.command}: error: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
