"""Latent-video flow-matching transformer.

Sequence layout: clean context-frame tokens (flow time 0) followed by noisy
future-frame tokens at flow time tau_v, with learned per-(frame, token)
positional embeddings. Each block runs self-attention over all video tokens,
cross-attention to the task's instruction tokens, and an MLP; every sub-block
is AdaLN-modulated from the flow-time embedding and zero-initialized, so a
fresh model is the identity on its token stream. The velocity head reads only
future-frame tokens; hidden states are the full token activations after a
chosen block.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import flow
from .autodiff import Tensor, no_grad
from .nn import (
    AdaLNZero,
    FlowTimeConditioner,
    LayerNorm,
    Linear,
    Mlp,
    Module,
    ModuleList,
    MultiheadAttention,
    Parameter,
    trunc_normal,
)


@dataclass
class VideoConfig:
    n_layers: int = 6
    d: int = 128
    n_heads: int = 4
    layer_k: int = 4
    h_o: int = 3
    h_f: int = 8
    frame: int = 32
    patch: int = 8
    channels: int = 3
    n_tasks: int = 10
    n_lang_tokens: int = 4
    d_t: int = 64
    act: str = "silu"

    def __post_init__(self):
        if not 1 <= self.layer_k <= self.n_layers:
            raise ValueError(f"layer_k {self.layer_k} outside [1, {self.n_layers}]")
        if self.h_o < 1 or self.h_f < 1:
            raise ValueError("need at least one context and one future frame")
        if self.frame % self.patch:
            raise ValueError(f"frame {self.frame} not divisible by patch {self.patch}")

    @property
    def tokens_per_frame(self):
        return (self.frame // self.patch) ** 2

    @property
    def n_frames(self):
        return self.h_o + self.h_f

    @property
    def n_tokens(self):
        return self.n_frames * self.tokens_per_frame

    @property
    def n_future_tokens(self):
        return self.h_f * self.tokens_per_frame


class VideoOut(NamedTuple):
    velocity: object          # (B, h_f, tokens, channels) Tensor or ndarray
    hidden: object            # (B, n_tokens, d) activations after layer_k


class DiTBlock(Module):
    """self-attention -> instruction cross-attention -> MLP, all AdaLN-gated."""

    def __init__(self, d, n_heads, d_c, rng, act="silu", kv_dim=None,
                 dtype=np.float32):
        super().__init__()
        self.ln1 = LayerNorm(d, affine=False, dtype=dtype)
        self.ln2 = LayerNorm(d, affine=False, dtype=dtype)
        self.ln3 = LayerNorm(d, affine=False, dtype=dtype)
        self.attn = MultiheadAttention(d, n_heads, rng, dtype=dtype)
        self.cross = MultiheadAttention(d, n_heads, rng, kv_dim=kv_dim, dtype=dtype)
        self.mlp = Mlp(d, rng, act=act, dtype=dtype)
        self.ada = AdaLNZero(d_c, d, n_subblocks=3, rng=rng, dtype=dtype)

    def __call__(self, x, lang, cond):
        (s1, b1, g1), (s2, b2, g2), (s3, b3, g3) = self.ada(cond)
        x = x + g1 * self.attn(self.ln1(x).affine_mod(s1, b1))
        x = x + g2 * self.cross(self.ln2(x).affine_mod(s2, b2), kv=lang)
        x = x + g3 * self.mlp(self.ln3(x).affine_mod(s3, b3))
        return x


class VideoBackbone(Module):
    def __init__(self, cfg: VideoConfig, tokenizer, rng):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = tokenizer
        d = cfg.d
        self.token_embed = Linear(cfg.channels, d, rng)
        self.pos_emb = Parameter(
            trunc_normal((1, cfg.n_tokens, d), 0.02, rng))
        self.task_table = Parameter(
            trunc_normal((cfg.n_tasks, cfg.n_lang_tokens, d), 0.02, rng))
        self.time_cond = FlowTimeConditioner(cfg.d_t, d, rng, act=cfg.act)
        self.blocks = ModuleList(
            [DiTBlock(d, cfg.n_heads, d, rng, act=cfg.act) for _ in range(cfg.n_layers)])
        self.head_norm = LayerNorm(d)
        self.head = Linear(d, cfg.channels, rng, zero_init=True)
        self.forward_calls = 0
        # tokenizer constants ride along in checkpoints as frozen parameters
        self.tok_mean = Parameter(np.asarray(tokenizer.mean, dtype=np.float32),
                                  trainable=False)
        self.tok_std = Parameter(np.asarray(tokenizer.std, dtype=np.float32),
                                 trainable=False)

    # ------------------------------------------------------------- forward

    def embed_tokens(self, z_past, z_future):
        cfg = self.cfg
        b = z_past.shape[0]
        if z_past.shape[1:] != (cfg.h_o, cfg.tokens_per_frame, cfg.channels):
            raise ValueError(f"bad context shape {z_past.shape}")
        if z_future.shape[1:] != (cfg.h_f, cfg.tokens_per_frame, cfg.channels):
            raise ValueError(f"bad future shape {z_future.shape}")
        tokens = np.concatenate([
            np.asarray(z_past, dtype=np.float32).reshape(b, -1, cfg.channels),
            np.asarray(z_future, dtype=np.float32).reshape(b, -1, cfg.channels),
        ], axis=1)
        return self.token_embed(Tensor(tokens)) + self.pos_emb

    def forward(self, z_past, z_future, task_ids, tau_v, upto=None) -> VideoOut:
        """Run blocks 1..upto (default all). Hidden states are the activations
        after block `layer_k`; the velocity is produced only on a full run."""
        cfg = self.cfg
        self.forward_calls += 1
        n_run = cfg.n_layers if upto is None else upto
        if not cfg.layer_k <= n_run <= cfg.n_layers:
            raise ValueError(f"upto {n_run} outside [{cfg.layer_k}, {cfg.n_layers}]")
        flow.check_flow_time(tau_v)
        tau_b = np.broadcast_to(np.asarray(tau_v, dtype=np.float64),
                                (z_past.shape[0],))
        x = self.embed_tokens(z_past, z_future)
        lang = self.task_table[np.asarray(task_ids, dtype=np.int64)]
        cond = self.time_cond(tau_b)
        hidden = None
        for i, block in enumerate(self.blocks):
            if i >= n_run:
                break
            x = block(x, lang, cond)
            if i + 1 == cfg.layer_k:
                hidden = x
        velocity = None
        if n_run == cfg.n_layers:
            fut = x[:, cfg.h_o * cfg.tokens_per_frame:, :]
            vel = self.head(self.head_norm(fut))
            velocity = vel.reshape(x.shape[0], cfg.h_f, cfg.tokens_per_frame,
                                   cfg.channels)
        return VideoOut(velocity=velocity, hidden=hidden)

    def hidden_states(self, z_past, z_future, task_ids, tau_v):
        """Activations after layer_k only (no velocity head)."""
        return self.forward(z_past, z_future, task_ids, tau_v,
                            upto=self.cfg.layer_k).hidden

    # ------------------------------------------------------------ sampling

    def partial_denoise(self, z_past, task_ids, tau_v, n_steps, rng):
        """Integrate the learned field from pure noise at tau=1 down to tau_v.

        At tau_v == 1 the drawn noise is returned with zero field evaluations.
        """
        cfg = self.cfg
        b = z_past.shape[0]
        eps = rng.standard_normal(
            (b, cfg.h_f, cfg.tokens_per_frame, cfg.channels), dtype=np.float32)
        if tau_v == 1.0:
            return eps
        with no_grad():
            def field(z, tau):
                out = self.forward(z_past, z, task_ids, tau)
                return out.velocity.data
            return flow.integrate(field, eps, 1.0, tau_v, n_steps)

    def generate_video(self, z_past, task_ids, n_steps, rng):
        """Full denoise to tau=0, decoded to pixel frames (qualitative dumps)."""
        z0 = self.partial_denoise(z_past, task_ids, 0.0, n_steps, rng)
        frames = np.stack([
            self.tokenizer.decode(z, (self.cfg.frame, self.cfg.frame))
            for z in z0])
        return frames


def train_video_step(model: VideoBackbone, opt, batch, time_dist, rng):
    """One flow-matching step on future-frame latents.

    Per-sample flow times, fresh noise, velocity regression on future tokens
    only; returns the scalar loss.
    """
    cfg = model.cfg
    z_past, z0_fut = batch["ctx"], batch["fut"]
    b = z_past.shape[0]
    tau = time_dist.sample(rng, b)
    eps = rng.standard_normal(z0_fut.shape, dtype=np.float32)
    z_tau = flow.interpolate(z0_fut, eps, tau[:, None, None, None])
    out = model.forward(z_past, z_tau, batch["task_ids"], tau)
    target = flow.conditional_target(z0_fut, eps)
    loss = flow.cfm_loss(out.velocity, target)
    loss.backward()
    opt.step()
    model.zero_grad()
    return float(loss.data)


def attach_video_lora(model: VideoBackbone, rank, alpha, rng):
    """Freeze the whole backbone, then adapter-ize every block projection."""
    model.freeze()
    adapters = []
    for block in model.blocks:
        for attn in (block.attn, block.cross):
            for lin in (attn.wq, attn.wk, attn.wv, attn.wo):
                adapters.append(lin.attach_lora(rank, alpha, rng))
        for lin in (block.mlp.fc1, block.mlp.fc2):
            adapters.append(lin.attach_lora(rank, alpha, rng))
    return adapters
