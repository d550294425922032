"""Image-shift experiment: how geometric (and optionally learned) distance errors grow with calibration drift.

    python scripts/shift_experiment.py --out runs/shift [--n 256] [--shifts 0 1 2 5 10] [--train-steps 2000]

Generates a synthetic dataset, optionally trains the toy head on it, then
writes the robustness table (JSON and CSV) and an SVG plot to --out.
"""

from __future__ import annotations

import argparse
import tempfile
from pathlib import Path

from omnidist.camera_model import default_camera
from omnidist.data_io import SceneConfig, generate_dataset, load_dataset
from omnidist.robustness import Perturbation, plot_svg, run_robustness, shift_x


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--n", type=int, default=256)
    ap.add_argument("--seed", type=int, default=6)
    ap.add_argument("--side", type=int, default=256)
    ap.add_argument("--shifts", type=float, nargs="+", default=[0, 1, 2, 5, 10])
    ap.add_argument("--pitch", type=float, nargs="*", default=[0.005, 0.01], help="extra pitch rows (rad)")
    ap.add_argument("--train-steps", type=int, default=0, help="train the toy head and add its columns")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        generate_dataset(args.seed, default_camera(args.side), SceneConfig(image_side_px=args.side), args.n, tmp)
        ds = load_dataset(tmp)
        toy = None
        if args.train_steps:
            from omnidist.toy_model import HeadConfig, train

            cfg = HeadConfig(steps=args.train_steps)
            toy = (train(ds, cfg).params, cfg)
        perts = [shift_x(s) for s in args.shifts] + [Perturbation(f"pitch {p:g}rad", dpitch_rad=p) for p in args.pitch]
        report = run_robustness(ds, perts, toy=toy)

    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "robustness.json").write_text(report.to_json())
    (args.out / "robustness.csv").write_text(report.to_csv())
    plot_svg(report, args.out / "robustness.svg")
    print(f"far bin [{report.far_bin[0]:.2f}, {report.far_bin[1]:.2f}) m")
    for r in report.rows:
        model = "" if r.model_delta_m is None else f"  head delta {r.model_delta_m:+.4f}"
        print(f"{r.label:>16}: abs {r.absolute_error_m:.4f} m  delta {r.delta_m:+.4f}  "
              f"far delta {r.far_delta_m:+.4f}  flagged {r.n_flagged}{model}")


if __name__ == "__main__":
    main()
