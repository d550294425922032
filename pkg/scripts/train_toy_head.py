"""Train the toy head on a fresh synthetic dataset and report the learning gate numbers.

    python scripts/train_toy_head.py --out runs/toy [--n 512] [--steps 2000] [--height-head]
"""

from __future__ import annotations

import argparse
import json
import tempfile
from pathlib import Path

from omnidist.camera_model import default_camera
from omnidist.data_io import SceneConfig, generate_dataset, load_dataset
from omnidist.evaluation import evaluate
from omnidist.toy_model import HeadConfig, load_images, predict, save_params, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--n", type=int, default=512)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--side", type=int, default=256)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--height-head", action="store_true")
    args = ap.parse_args()

    cfg = HeadConfig(steps=args.steps, enable_height_head=args.height_head)
    with tempfile.TemporaryDirectory() as tmp:
        generate_dataset(args.seed, default_camera(args.side), SceneConfig(image_side_px=args.side), args.n, tmp)
        ds = load_dataset(tmp)
        images = load_images(ds)
        every = max(1, args.steps // 10)

        def progress(step, loss):
            if step % every == 0:
                print(f"step {step:5d}  loss {loss.total:.4f}")

        res = train(ds, cfg, images=images, progress=progress)
        dets, gts, heights = {}, {}, []
        for i in res.val_indices:
            rec = ds.records[i]
            dets[rec.image], h = predict(res.params, images[i], cfg, ds.camera_for(rec))
            gts[rec.image] = rec.objects
            if h is not None:
                heights.append(h)

    report = evaluate(dets, gts)
    summary = {
        "initial_val_mae_m": res.initial_val_mae,
        "final_val_mae_m": res.val_mae[-1] if res.val_mae else res.initial_val_mae,
        "val_map50": report.map50,
        "val_weighted_error": report.weighted_error,
        "mean_height_estimate_m": sum(heights) / len(heights) if heights else None,
    }
    args.out.mkdir(parents=True, exist_ok=True)
    save_params(res.params, args.out / "params.npz")
    (args.out / "head_config.json").write_text(json.dumps({"head": cfg.to_dict()}, indent=2) + "\n")
    (args.out / "report.json").write_text(report.to_json())
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
