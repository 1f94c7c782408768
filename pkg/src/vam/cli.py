"""Command-line entry points.

Subcommands: gen-data, train-video, train-decoder, train-baseline, eval,
eval-oracle, sweep-tau, sample-efficiency, render-rollout. Flags override
config-file values; every command is deterministic for a fixed --seed and
writes its resolved configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import RunConfig


def build_parser():
    p = argparse.ArgumentParser(prog="vam", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="runs"):
        sp.add_argument("--config", type=str, default=None, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=str, default=out_default)
        sp.add_argument("--layer-k", type=int, default=None,
                        help="hidden-state extraction layer override")
        return sp

    sp = common(sub.add_parser("gen-data", help="write expert episode datasets"))
    sp.add_argument("--family", choices=["A", "B", "heldout", "all"], default="all")
    sp.add_argument("--episodes-per-task", type=int, default=None)

    sp = common(sub.add_parser("train-video", help="stage 1: video backbone"))
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--resume", type=str, default=None)
    sp.add_argument("--lora", action="store_true",
                    help="adapter-finetune a base checkpoint on --data-dir")
    sp.add_argument("--base", type=str, default=None,
                    help="base checkpoint for --lora")

    sp = common(sub.add_parser("train-decoder", help="stage 2: action decoder"))
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--video", required=True, help="frozen backbone checkpoint")
    sp.add_argument("--data-fraction", type=float, default=1.0)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--resume", type=str, default=None)
    sp.add_argument("--lora-backbone", action="store_true",
                    help="the backbone checkpoint carries adapters")

    sp = common(sub.add_parser("train-baseline", help="context-only baseline"))
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--data-fraction", type=float, default=1.0)
    sp.add_argument("--steps", type=int, default=None)

    sp = common(sub.add_parser("eval", help="closed-loop policy evaluation"))
    sp.add_argument("--video", required=True)
    sp.add_argument("--decoder", required=True)
    sp.add_argument("--tau-v", type=float, default=None)
    sp.add_argument("--n-rollouts", type=int, default=None)
    sp.add_argument("--lora-backbone", action="store_true")

    sp = common(sub.add_parser("eval-oracle",
                               help="ground-truth-conditioning study"))
    sp.add_argument("--video", required=True)
    sp.add_argument("--decoder", required=True)
    sp.add_argument("--heldout-dir", required=True)
    sp.add_argument("--lora-backbone", action="store_true")

    sp = common(sub.add_parser("sweep-tau", help="success rate across tau_v"))
    sp.add_argument("--video", required=True)
    sp.add_argument("--decoder", required=True)
    sp.add_argument("--lora-backbone", action="store_true")

    sp = common(sub.add_parser("sample-efficiency",
                               help="data-fraction comparison vs baseline"))
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--video", required=True)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--lora-backbone", action="store_true")

    sp = common(sub.add_parser("render-rollout", help="PPM dump of one rollout"))
    sp.add_argument("--video", required=True)
    sp.add_argument("--decoder", required=True)
    sp.add_argument("--task", type=int, default=8)
    sp.add_argument("--tau-v", type=float, default=None)
    sp.add_argument("--lora-backbone", action="store_true")

    return p


def resolve_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out = args.out
    steps = getattr(args, "steps", None)
    if steps is not None:
        if args.command == "train-video":
            cfg.video_train.steps = steps
        else:
            cfg.decoder_train.steps = steps
    tau_v = getattr(args, "tau_v", None)
    if tau_v is not None:
        cfg.eval.tau_v = tau_v
    if getattr(args, "layer_k", None) is not None:
        cfg.video.layer_k = args.layer_k
    if getattr(args, "episodes_per_task", None):
        cfg.data.episodes_per_task_a = args.episodes_per_task
        cfg.data.episodes_per_task_b = args.episodes_per_task
    if getattr(args, "data_fraction", None) is not None:
        pass  # handled per command
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    cfg = resolve_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")

    from . import experiments, training

    if args.command == "gen-data":
        families = ["A", "B", "heldout"] if args.family == "all" else [args.family]
        for fam in families:
            experiments.gen_data(cfg, out, fam)
        return 0

    if args.command == "train-video":
        training.train_video(cfg, args.data_dir, out, resume=args.resume,
                             lora=args.lora, base=args.base)
        return 0

    if args.command == "train-decoder":
        training.train_decoder(cfg, args.data_dir, out, args.video,
                               fraction=args.data_fraction, resume=args.resume,
                               lora_backbone=args.lora_backbone)
        return 0

    if args.command == "train-baseline":
        training.train_baseline(cfg, args.data_dir, out,
                                fraction=args.data_fraction)
        return 0

    if args.command == "eval":
        experiments.eval_command(cfg, args.video, args.decoder, out,
                                 tau_v=args.tau_v, n_rollouts=args.n_rollouts,
                                 lora=args.lora_backbone)
        return 0

    if args.command == "eval-oracle":
        experiments.oracle_study(cfg, args.video, args.decoder,
                                 args.heldout_dir, out, lora=args.lora_backbone)
        return 0

    if args.command == "sweep-tau":
        experiments.sweep_tau_command(cfg, args.video, args.decoder, out,
                                      lora=args.lora_backbone)
        return 0

    if args.command == "sample-efficiency":
        experiments.sample_efficiency_study(cfg, args.data_dir, args.video,
                                            out, lora=args.lora_backbone)
        return 0

    if args.command == "render-rollout":
        experiments.render_rollout(cfg, args.video, args.decoder, args.task,
                                   out, tau_v=args.tau_v,
                                   lora=args.lora_backbone)
        return 0

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
