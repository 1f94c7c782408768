"""Experiment program: dataset emission, the ground-truth-conditioning study,
flow-time sweeps, sample-efficiency and convergence comparisons, rollout
rendering. Functions write CSV/PPM artifacts and return the numbers they
wrote, so tests can assert on either."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import env as world
from .config import logit_spaced_grid
from .flow import default_video_steps
from .dataset import generate_dataset, load_episodes
from .evaluate import (
    REPORT_HEADER,
    action_mse_curve,
    evaluate_policy,
    sweep_tau,
)
from .ppm import write_ppm
from .training import (
    load_backbone,
    load_decoder,
    train_baseline,
    train_decoder,
    write_csv,
)


def gen_data(cfg, root, family, log=print):
    """Write one dataset directory. The held-out split offsets the seed so
    its episodes never coincide with training data."""
    root = Path(root)
    dc = cfg.data
    if family == "A":
        tasks, n, seed = world.FAMILY_A, dc.episodes_per_task_a, cfg.seed
        out = root / "dataset_A"
    elif family == "B":
        tasks, n, seed = world.FAMILY_B, dc.episodes_per_task_b, cfg.seed
        out = root / "dataset_B"
    elif family == "heldout":
        tasks, n, seed = world.FAMILY_B, dc.episodes_per_task_heldout, cfg.seed + 1000
        out = root / "dataset_B_heldout"
    else:
        raise ValueError(f"unknown family {family!r}")
    manifest = generate_dataset(tasks, n, seed, out, patch=cfg.video.patch,
                                max_steps=dc.max_expert_steps)
    log(f"[gen-data] family {family}: {manifest['n_episodes']} episodes -> {out}")
    return out, manifest


def eval_command(cfg, video_ckpt, decoder_ckpt, out_dir, tau_v=None,
                 n_rollouts=None, conditioning="policy", lora=False, log=print):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    eval_cfg = cfg.eval
    if n_rollouts is not None:
        eval_cfg.n_rollouts = n_rollouts
    backbone = load_backbone(cfg, video_ckpt, lora=lora)
    backbone.freeze()
    decoder = load_decoder(cfg, decoder_ckpt)
    decoder.freeze()
    report = evaluate_policy(backbone, decoder, world.FAMILY_B, eval_cfg,
                             cfg.seed, tau_v=tau_v, conditioning=conditioning)
    write_csv(out / "eval_report.csv", REPORT_HEADER, report.rows(),
              cfg.config_hash(), cfg.seed)
    for t in report.per_task:
        log(f"[eval] task {t.task_id}: SR {t.success_rate:.1f}% "
            f"(n={t.n_rollouts}, len {t.mean_len:.1f}, "
            f"forwards/chunk {t.backbone_forwards_per_chunk}, "
            f"wall/chunk {t.wall_per_chunk * 1e3:.0f} ms)")
    log(f"[eval] average SR {report.avg_success_rate:.1f}%")
    return report


def oracle_study(cfg, video_ckpt, decoder_ckpt, heldout_dir, out_dir,
                 lora=False, log=print):
    """Two conditioning studies against ground-truth futures: (a) open-loop
    action-reconstruction error across a logit-spaced flow-time grid, (b)
    teacher-forced closed-loop success at the error-optimal flow time."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    backbone = load_backbone(cfg, video_ckpt, lora=lora)
    backbone.freeze()
    decoder = load_decoder(cfg, decoder_ckpt)
    decoder.freeze()
    episodes, _ = load_episodes(heldout_dir)
    grid = logit_spaced_grid(cfg.sweep.mse_grid_lo, cfg.sweep.mse_grid_hi,
                             cfg.sweep.mse_grid_points)
    mse_rows = action_mse_curve(backbone, decoder, episodes, grid, cfg.eval,
                                cfg.seed, n_windows=cfg.sweep.mse_windows)
    write_csv(out / "oracle_mse_curve.csv", ["tau_v", "action_mse", "stderr"],
              mse_rows, cfg.config_hash(), cfg.seed)
    best_tau = min(mse_rows, key=lambda r: r[1])[0]
    log(f"[eval-oracle] reconstruction-optimal tau_v = {best_tau:.4f}")
    report = evaluate_policy(backbone, decoder, world.FAMILY_B, cfg.eval,
                             cfg.seed, tau_v=best_tau, conditioning="oracle")
    write_csv(out / "oracle_eval_report.csv", REPORT_HEADER, report.rows(),
              cfg.config_hash(), cfg.seed)
    log(f"[eval-oracle] teacher-forced SR at tau_v={best_tau:.3f}: "
        f"{report.avg_success_rate:.1f}%")
    return mse_rows, best_tau, report


def sweep_tau_command(cfg, video_ckpt, decoder_ckpt, out_dir, lora=False,
                      log=print):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    backbone = load_backbone(cfg, video_ckpt, lora=lora)
    backbone.freeze()
    decoder = load_decoder(cfg, decoder_ckpt)
    decoder.freeze()
    grid = list(cfg.sweep.tau_grid)
    if 1.0 not in grid:
        grid.append(1.0)
    rows, best_rows = sweep_tau(backbone, decoder, world.FAMILY_B, grid,
                                cfg.eval, cfg.seed)
    write_csv(out / "sweep_tau.csv", ["tau_v", "task_id", "success_rate", "stderr"],
              rows, cfg.config_hash(), cfg.seed)
    write_csv(out / "best_tau.csv", ["task_id", "best_tau_v", "success_rate"],
              best_rows, cfg.config_hash(), cfg.seed)
    for tau_v, tid, sr, _ in rows:
        if tid == "avg":
            log(f"[sweep-tau] tau_v={tau_v:.3f}: avg SR {sr:.1f}%")
    return rows, best_rows


def sample_efficiency_study(cfg, data_dir, video_ckpt, out_dir, lora=False,
                            log=print):
    """Matched-budget comparison of the decoder-on-frozen-backbone arm
    against the context-only end-to-end baseline across nested dataset
    fractions. Returns curve rows and the realized efficiency ratio."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    runs = {}
    for fraction in cfg.sweep.fractions:
        vam_dir = out / f"vam_f{fraction:g}"
        dec_ckpt, periodic = train_decoder(cfg, data_dir, vam_dir, video_ckpt,
                                           fraction=fraction,
                                           lora_backbone=lora, log=log)
        backbone = load_backbone(cfg, video_ckpt, lora=lora)
        backbone.freeze()
        decoder = load_decoder(cfg, dec_ckpt)
        rep = evaluate_policy(backbone, decoder, world.FAMILY_B, cfg.eval,
                              cfg.seed)
        rows.append(("vam", float(fraction), rep.avg_success_rate,
                     rep.avg_stderr))
        runs[("vam", fraction)] = (vam_dir, periodic)
        log(f"[sample-efficiency] vam f={fraction}: SR {rep.avg_success_rate:.1f}%")

        base_dir = out / f"baseline_f{fraction:g}"
        enc_ckpt, bdec_ckpt, bperiodic = train_baseline(cfg, data_dir, base_dir,
                                                        fraction=fraction, log=log)
        encoder = load_backbone(cfg, enc_ckpt)
        encoder.freeze()
        bdecoder = load_decoder(cfg, bdec_ckpt)
        rep = evaluate_policy(encoder, bdecoder, world.FAMILY_B, cfg.eval,
                              cfg.seed, tau_v=1.0)
        rows.append(("baseline", float(fraction), rep.avg_success_rate,
                     rep.avg_stderr))
        runs[("baseline", fraction)] = (base_dir, bperiodic)
        log(f"[sample-efficiency] baseline f={fraction}: SR {rep.avg_success_rate:.1f}%")

    write_csv(out / "sample_efficiency.csv",
              ["arm", "fraction", "success_rate", "stderr"], rows,
              cfg.config_hash(), cfg.seed)
    baseline_full = next(sr for arm, f, sr, _ in rows
                         if arm == "baseline" and f == 1.0)
    vam_rows = sorted((f, sr) for arm, f, sr, _ in rows if arm == "vam")
    ratio = None
    for f, sr in vam_rows:
        if sr >= baseline_full:
            ratio = 1.0 / f
            break
    write_csv(out / "efficiency_ratio.csv",
              ["baseline_full_sr", "smallest_matching_fraction", "ratio"],
              [(baseline_full,
                1.0 / ratio if ratio else float("nan"),
                ratio if ratio else float("nan"))],
              cfg.config_hash(), cfg.seed)
    log(f"[sample-efficiency] realized efficiency ratio: {ratio}")
    return rows, ratio, runs


def convergence_study(cfg, data_dir, video_ckpt, vam_run, baseline_run,
                      out_dir, lora=False, log=print):
    """Success-rate-versus-step curves from the periodic checkpoints of one
    decoder run and one baseline run, plus steps-to-90%-of-final for each."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []

    def sr_of(backbone, decoder, tau_v=None):
        rep = evaluate_policy(backbone, decoder, world.FAMILY_B, cfg.eval,
                              cfg.seed, tau_v=tau_v)
        return rep.avg_success_rate

    backbone = load_backbone(cfg, video_ckpt, lora=lora)
    backbone.freeze()
    vam_dir, vam_periodic = vam_run
    vam_points = []
    for step, path in vam_periodic:
        sr = sr_of(backbone, load_decoder(cfg, path))
        vam_points.append((step, sr))
        rows.append(("vam", step, sr))
        log(f"[convergence] vam step {step}: SR {sr:.1f}%")
    sr = sr_of(backbone, load_decoder(cfg, Path(vam_dir) / "decoder.ckpt"))
    vam_points.append((cfg.decoder_train.steps, sr))
    rows.append(("vam", cfg.decoder_train.steps, sr))

    base_dir, base_periodic = baseline_run
    base_points = []
    for step, epath, dpath in base_periodic:
        enc = load_backbone(cfg, epath)
        enc.freeze()
        sr = sr_of(enc, load_decoder(cfg, dpath), tau_v=1.0)
        base_points.append((step, sr))
        rows.append(("baseline", step, sr))
        log(f"[convergence] baseline step {step}: SR {sr:.1f}%")
    enc = load_backbone(cfg, Path(base_dir) / "baseline_encoder.ckpt")
    enc.freeze()
    sr = sr_of(enc, load_decoder(cfg, Path(base_dir) / "baseline_decoder.ckpt"),
               tau_v=1.0)
    base_points.append((cfg.decoder_train.steps, sr))
    rows.append(("baseline", cfg.decoder_train.steps, sr))

    write_csv(out / "convergence.csv", ["arm", "step", "success_rate"], rows,
              cfg.config_hash(), cfg.seed)

    def steps_to_90(points):
        final = points[-1][1]
        for step, sr in points:
            if sr >= 0.9 * final:
                return step
        return points[-1][0]

    vam_steps = steps_to_90(vam_points)
    base_steps = steps_to_90(base_points)
    write_csv(out / "convergence_summary.csv",
              ["arm", "steps_to_90pct_of_final", "final_sr"],
              [("vam", vam_steps, vam_points[-1][1]),
               ("baseline", base_steps, base_points[-1][1])],
              cfg.config_hash(), cfg.seed)
    log(f"[convergence] steps to 90% of final: vam {vam_steps}, "
        f"baseline {base_steps}")
    return vam_points, base_points, vam_steps, base_steps


def render_rollout(cfg, video_ckpt, decoder_ckpt, task_id, out_dir, tau_v=None,
                   lora=False, log=print):
    """One policy rollout: executed frames plus, per chunk, the fully
    denoised latent video plan, dumped as P6 files."""
    from .action_model import sample_action_chunk

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    backbone = load_backbone(cfg, video_ckpt, lora=lora)
    backbone.freeze()
    decoder = load_decoder(cfg, decoder_ckpt)
    decoder.freeze()
    task = world.task_by_id(task_id)
    eval_cfg = cfg.eval
    tau_v = eval_cfg.tau_v if tau_v is None else tau_v
    tok = backbone.tokenizer
    rng = np.random.default_rng([cfg.seed, task.task_id, 3])
    state = world.reset(task, rollout_seed_of(cfg.seed, task.task_id))
    latents = [tok.encode(world.render(state)[None])[0]]
    files = []
    steps = 0
    chunk_idx = 0
    won = False
    while not won and steps < eval_cfg.max_steps:
        chunk_idx += 1
        idx = np.clip(np.arange(len(latents) - backbone.cfg.h_o, len(latents)),
                      0, None)
        z_past = np.stack([np.stack([latents[i] for i in idx])])
        plan = backbone.generate_video(z_past, np.array([task.task_id]),
                                       eval_cfg.video_steps_full, rng)[0]
        for j, frame in enumerate(plan):
            name = f"plan_c{chunk_idx:02d}_f{j + 1}.ppm"
            write_ppm(out / name, frame)
            files.append(name)
        chunk = sample_action_chunk(
            backbone, decoder, z_past, state.proprio()[None],
            np.array([task.task_id]), tau_v,
            default_video_steps(tau_v, eval_cfg.video_steps_full),
            eval_cfg.n_action_steps, rng)
        for a in chunk.actions[0]:
            state = world.step(state, a.astype(np.float64))
            steps += 1
            latents.append(tok.encode(world.render(state)[None])[0])
            name = f"exec_{steps:04d}.ppm"
            write_ppm(out / name, world.render(state))
            files.append(name)
            if world.success(state, task):
                won = True
                break
            if steps >= eval_cfg.max_steps:
                break
    log(f"[render-rollout] task {task_id}: {steps} steps, success={won}, "
        f"{len(files)} frames -> {out}")
    return files, steps, chunk_idx, won


def rollout_seed_of(seed, task_id):
    from .evaluate import rollout_seed

    return rollout_seed(seed, task_id, 0)
