#!/usr/bin/env python3
"""End-to-end reproduction: datasets -> stage-1 backbone -> stage-2 decoder ->
evaluation, conditioning study and flow-time sweep. Roughly an hour of CPU
time at default settings; pass --quick for a smoke-scale run.

Usage: python scripts/run_pipeline.py --out runs/pipeline [--seed 0] [--quick]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from vam.config import RunConfig
from vam.experiments import (
    eval_command,
    gen_data,
    oracle_study,
    render_rollout,
    sweep_tau_command,
)
from vam.training import train_decoder, train_video


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/pipeline")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--quick", action="store_true",
                    help="tiny models/datasets, minutes instead of an hour")
    args = ap.parse_args()

    cfg = RunConfig()
    cfg.seed = args.seed
    if args.quick:
        cfg.data.episodes_per_task_a = 8
        cfg.data.episodes_per_task_b = 8
        cfg.data.episodes_per_task_heldout = 4
        cfg.video_train.steps = 120
        cfg.decoder_train.steps = 120
        cfg.decoder_train.ckpt_every = 60
        cfg.eval.n_rollouts = 5
        cfg.sweep.mse_windows = 32

    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    cfg.save(root / "config.json")

    gen_data(cfg, root, "A")
    gen_data(cfg, root, "B")
    gen_data(cfg, root, "heldout")
    video = train_video(cfg, root / "dataset_A", root / "stage1")
    decoder, _ = train_decoder(cfg, root / "dataset_B", root / "stage2", video)

    eval_command(cfg, video, decoder, root / "eval")
    oracle_study(cfg, video, decoder, root / "dataset_B_heldout", root / "oracle")
    sweep_tau_command(cfg, video, decoder, root / "sweep")
    render_rollout(cfg, video, decoder, task_id=8, out_dir=root / "frames")
    print(f"done; artifacts under {root}")


if __name__ == "__main__":
    main()
