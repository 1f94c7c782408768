"""Stage loops: video backbone pretraining (with optional adapter finetuning),
action decoder training against a frozen backbone, and the context-only
end-to-end baseline.

Each step derives its generator from (run seed, stage tag, step index), so a
resumed run consumes exactly the randomness the uninterrupted run would have;
together with float32 optimizer state this makes resumption bit-exact.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .action_model import (
    ActionDecoder,
    train_baseline_step,
    train_decoder_step,
)
from .dataset import WindowDataset, load_episodes
from .flow import LogitNormalTime, SqrtShiftedTime
from .optim import AdamW
from .tokenizer import LatentTokenizer
from .video_model import VideoBackbone, attach_video_lora, train_video_step


def step_rng(seed, tag, step):
    return np.random.default_rng([int(seed), int(tag), int(step)])


def write_csv(path, header, rows, config_hash, seed):
    """CSV with a provenance comment line; numbers via repr so reruns are
    byte-identical."""
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={config_hash} seed={seed}\n")
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path):
    with open(path) as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def build_backbone(cfg, manifest=None, tokenizer=None, seed=0, lora=False):
    if tokenizer is None:
        tokenizer = LatentTokenizer.from_json(manifest["tokenizer"])
    model = VideoBackbone(cfg.video, tokenizer, np.random.default_rng([seed, 11]))
    if lora:
        attach_video_lora(model, cfg.video_train.lora_rank,
                          cfg.video_train.lora_alpha,
                          np.random.default_rng([seed, 12]))
    return model


def build_decoder(cfg, seed=0):
    return ActionDecoder(cfg.decoder, cfg.video.d, np.random.default_rng([seed, 13]))


def load_backbone(cfg, path, lora=False):
    manifest_free_tok = LatentTokenizer(patch=cfg.video.patch, mean=(0, 0, 0),
                                        std=(1, 1, 1))
    model = build_backbone(cfg, tokenizer=manifest_free_tok, seed=0, lora=lora)
    ckpt.load_model(path, model)
    model.tokenizer = LatentTokenizer(
        patch=cfg.video.patch,
        mean=tuple(float(x) for x in model.tok_mean.data),
        std=tuple(float(x) for x in model.tok_std.data))
    return model


def load_decoder(cfg, path):
    dec = build_decoder(cfg, seed=0)
    ckpt.load_model(path, dec)
    return dec


def train_video(cfg, data_dir, out_dir, resume=None, lora=False, base=None,
                log=print):
    """Stage 1: flow-matching video pretraining (or adapter finetuning when
    `lora` is set, starting from `base` and touching only adapter weights)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    episodes, manifest = load_episodes(data_dir)
    vt = cfg.video_train
    seed = cfg.seed
    if lora:
        if base is None:
            raise ValueError("lora finetuning needs a base checkpoint")
        model = load_backbone(cfg, base)
        attach_video_lora(model, vt.lora_rank, vt.lora_alpha,
                          np.random.default_rng([seed, 12]))
        steps, lr = vt.lora_steps, vt.lora_lr
    else:
        model = build_backbone(cfg, manifest=manifest, seed=seed)
        steps, lr = vt.steps, vt.lr
    ds = WindowDataset(episodes, model.tokenizer, cfg.video.h_o, cfg.video.h_f,
                       cfg.decoder.h_a)
    opt = AdamW(model.named_parameters(), lr=lr, weight_decay=vt.weight_decay,
                clip_norm=vt.clip_norm, warmup_steps=vt.warmup,
                total_steps=steps, schedule=vt.schedule)
    if resume:
        ckpt.load_train_state(resume, model, opt)
    time_dist = LogitNormalTime(vt.time_mu, vt.time_sigma)
    losses = []
    for step in range(opt.step_count + 1, steps + 1):
        rng = step_rng(seed, 2, step)
        batch = ds.batch(rng, vt.batch)
        loss = train_video_step(model, opt, batch, time_dist, rng)
        losses.append((step, loss))
        if step % vt.log_every == 0 or step == steps:
            log(f"[stage1{'-lora' if lora else ''}] step {step}/{steps} loss {loss:.4f}")
    name = "video_lora" if lora else "video"
    ckpt.save_model(out / f"{name}.ckpt", model)
    ckpt.save_train_state(out / f"{name}_state.ckpt", model, opt)
    write_csv(out / f"{name}_loss.csv", ["step", "loss"], losses,
              cfg.config_hash(), seed)
    return out / f"{name}.ckpt"


def train_decoder(cfg, data_dir, out_dir, video_ckpt, fraction=1.0,
                  resume=None, lora_backbone=False, log=print):
    """Stage 2: action decoder on a frozen backbone, with periodic checkpoints
    for convergence curves and recorded flow-time draws."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    episodes, _ = load_episodes(data_dir, fraction=fraction)
    dt = cfg.decoder_train
    seed = cfg.seed
    backbone = load_backbone(cfg, video_ckpt, lora=lora_backbone)
    backbone.freeze()
    frozen_hash = backbone.params_hash()
    decoder = build_decoder(cfg, seed=seed)
    ds = WindowDataset(episodes, backbone.tokenizer, cfg.video.h_o,
                       cfg.video.h_f, cfg.decoder.h_a)
    opt = AdamW(decoder.named_parameters(), lr=dt.lr,
                weight_decay=dt.weight_decay, clip_norm=dt.clip_norm,
                warmup_steps=dt.warmup, total_steps=dt.steps,
                schedule=dt.schedule)
    if resume:
        ckpt.load_train_state(resume, decoder, opt)
    tv = LogitNormalTime(cfg.video_train.time_mu, cfg.video_train.time_sigma)
    ta = SqrtShiftedTime(dt.tau_a_floor)
    losses = []
    taus = []
    periodic = []
    for step in range(opt.step_count + 1, dt.steps + 1):
        rng = step_rng(seed, 3, step)
        batch = ds.batch(rng, dt.batch)
        collect = taus if len(taus) * dt.batch < dt.record_taus else None
        loss = train_decoder_step(decoder, backbone, opt, batch, tv, ta, rng,
                                  collect=collect)
        losses.append((step, loss))
        if dt.ckpt_every and step % dt.ckpt_every == 0 and step < dt.steps:
            path = out / f"decoder_step{step:05d}.ckpt"
            ckpt.save_model(path, decoder)
            periodic.append((step, path))
        if step % dt.log_every == 0 or step == dt.steps:
            log(f"[stage2 f={fraction}] step {step}/{dt.steps} loss {loss:.4f}")
    if backbone.params_hash() != frozen_hash:
        raise RuntimeError("frozen backbone changed during decoder training")
    ckpt.save_model(out / "decoder.ckpt", decoder)
    ckpt.save_train_state(out / "decoder_state.ckpt", decoder, opt)
    write_csv(out / "decoder_loss.csv", ["step", "loss"], losses,
              cfg.config_hash(), seed)
    if taus:
        pairs = np.concatenate([np.stack(p, axis=1) for p in taus])[: dt.record_taus]
        write_csv(out / "tau_draws.csv", ["tau_v", "tau_a"],
                  [(float(a), float(b)) for a, b in pairs],
                  cfg.config_hash(), seed)
    return out / "decoder.ckpt", periodic


def train_baseline(cfg, data_dir, out_dir, fraction=1.0, log=print):
    """Context-only baseline trained end-to-end with the action loss: the
    same encoder architecture, future tokens held at pure noise, tau_v = 1."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    episodes, manifest = load_episodes(data_dir, fraction=fraction)
    dt = cfg.decoder_train
    seed = cfg.seed
    encoder = build_backbone(cfg, manifest=manifest, seed=seed + 500)
    decoder = ActionDecoder(cfg.decoder, cfg.video.d,
                            np.random.default_rng([seed, 14]))
    ds = WindowDataset(episodes, encoder.tokenizer, cfg.video.h_o,
                       cfg.video.h_f, cfg.decoder.h_a)
    named = ([(f"encoder.{n}", p) for n, p in encoder.named_parameters()]
             + [(f"decoder.{n}", p) for n, p in decoder.named_parameters()])
    opt = AdamW(named, lr=dt.baseline_lr, weight_decay=dt.weight_decay,
                clip_norm=dt.clip_norm, warmup_steps=dt.warmup,
                total_steps=dt.steps, schedule=dt.schedule)
    ta = SqrtShiftedTime(dt.tau_a_floor)
    losses = []
    periodic = []
    for step in range(1, dt.steps + 1):
        rng = step_rng(seed, 4, step)
        batch = ds.batch(rng, dt.batch)
        loss = train_baseline_step(encoder, decoder, opt, batch, ta, rng)
        losses.append((step, loss))
        if dt.ckpt_every and step % dt.ckpt_every == 0 and step < dt.steps:
            epath = out / f"baseline_encoder_step{step:05d}.ckpt"
            dpath = out / f"baseline_decoder_step{step:05d}.ckpt"
            ckpt.save_model(epath, encoder)
            ckpt.save_model(dpath, decoder)
            periodic.append((step, epath, dpath))
        if step % dt.log_every == 0 or step == dt.steps:
            log(f"[baseline f={fraction}] step {step}/{dt.steps} loss {loss:.4f}")
    ckpt.save_model(out / "baseline_encoder.ckpt", encoder)
    ckpt.save_model(out / "baseline_decoder.ckpt", decoder)
    write_csv(out / "baseline_loss.csv", ["step", "loss"], losses,
              cfg.config_hash(), seed)
    return out / "baseline_encoder.ckpt", out / "baseline_decoder.ckpt", periodic
