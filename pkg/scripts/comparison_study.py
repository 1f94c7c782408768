#!/usr/bin/env python3
"""Sample-efficiency and convergence comparison against the context-only
baseline. Trains both arms at every data fraction (the heavy part of the
experiment program) and evaluates their periodic checkpoints.

Usage: python scripts/comparison_study.py --out runs/study \
           --data-dir runs/pipeline/dataset_B --video runs/pipeline/stage1/video.ckpt
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from vam.config import RunConfig
from vam.experiments import convergence_study, sample_efficiency_study


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/study")
    ap.add_argument("--data-dir", required=True)
    ap.add_argument("--video", required=True)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = RunConfig()
    cfg.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")

    rows, ratio, runs = sample_efficiency_study(cfg, args.data_dir, args.video, out)
    convergence_study(cfg, args.data_dir, args.video,
                      runs[("vam", 1.0)], runs[("baseline", 1.0)],
                      out / "convergence")
    print(f"done; realized efficiency ratio {ratio}x; artifacts under {out}")


if __name__ == "__main__":
    main()
