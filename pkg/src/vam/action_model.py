"""Flow-matching action decoder conditioned on video hidden states.

A small transformer over [proprio token | action-step tokens] whose layers
cross-attend to the video model's layer-k activations, self-attend over the
1 + H_a tokens, and apply an MLP; every sub-block is AdaLN-modulated by a
joint low-rank bilinear-affine encoding of the two flow times (tau_v, tau_a).
During training the proprio token is randomly replaced by a learned mask
token. Action sampling follows the two-stage procedure: partially denoise
video latents to tau_v, extract hidden states with one more backbone pass,
then integrate the action field from pure noise to zero.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import flow
from .autodiff import Tensor, no_grad
from .dataset import denormalize_actions, normalize_proprio
from .nn import (
    AdaLNZero,
    BilinearTimeCond,
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
class DecoderConfig:
    n_layers: int = 4
    d: int = 96
    n_heads: int = 4
    h_a: int = 8
    d_a: int = 3
    d_q: int = 3
    p_mask: float = 0.1
    bilinear_rank: int = 4
    d_t: int = 64
    act: str = "silu"

    def __post_init__(self):
        if not 0.0 <= self.p_mask <= 1.0:
            raise ValueError(f"p_mask outside [0, 1]: {self.p_mask}")


class DecoderBlock(Module):
    """cross-attention to video hidden states -> self-attention -> MLP."""

    def __init__(self, d, n_heads, kv_dim, d_c, rng, act="silu"):
        super().__init__()
        self.ln1 = LayerNorm(d, affine=False)
        self.ln2 = LayerNorm(d, affine=False)
        self.ln3 = LayerNorm(d, affine=False)
        self.cross = MultiheadAttention(d, n_heads, rng, kv_dim=kv_dim)
        self.attn = MultiheadAttention(d, n_heads, rng)
        self.mlp = Mlp(d, rng, act=act)
        self.ada = AdaLNZero(d_c, d, n_subblocks=3, rng=rng)

    def __call__(self, x, hidden, cond):
        (s1, b1, g1), (s2, b2, g2), (s3, b3, g3) = self.ada(cond)
        x = x + g1 * self.cross(self.ln1(x).affine_mod(s1, b1), kv=hidden)
        x = x + g2 * self.attn(self.ln2(x).affine_mod(s2, b2))
        x = x + g3 * self.mlp(self.ln3(x).affine_mod(s3, b3))
        return x


class ActionDecoder(Module):
    def __init__(self, cfg: DecoderConfig, video_d, rng):
        super().__init__()
        self.cfg = cfg
        self.video_d = video_d
        d = cfg.d
        self.action_in = Mlp(cfg.d_a, rng, hidden=d, act=cfg.act, d_out=d)
        self.proprio_in = Mlp(cfg.d_q, rng, hidden=d, act=cfg.act, d_out=d)
        self.mask_token = Parameter(trunc_normal((d,), 0.02, rng))
        self.pos_emb = Parameter(trunc_normal((1, 1 + cfg.h_a, d), 0.02, rng))
        self.time_cond = BilinearTimeCond(cfg.d_t, d, cfg.bilinear_rank, rng)
        self.blocks = ModuleList(
            [DecoderBlock(d, cfg.n_heads, video_d, d, rng, act=cfg.act)
             for _ in range(cfg.n_layers)])
        self.head_norm = LayerNorm(d)
        self.head = Linear(d, cfg.d_a, rng, zero_init=True)

    def forward(self, a_noisy, q_norm, hidden, tau_a, tau_v, mask_flags=None):
        """Velocity over the action chunk.

        a_noisy: (B, h_a, d_a) at flow time tau_a; q_norm: (B, d_q) normalized
        proprio; hidden: (B, T, video_d); tau_a/tau_v scalars or (B,);
        mask_flags: optional (B,) floats, 1 = replace proprio with mask token.
        """
        cfg = self.cfg
        b = a_noisy.shape[0]
        if a_noisy.shape[1:] != (cfg.h_a, cfg.d_a):
            raise ValueError(f"bad action shape {a_noisy.shape}")
        if hidden.shape[-1] != self.video_d:
            raise ValueError(
                f"hidden width {hidden.shape[-1]} != decoder kv width {self.video_d}")
        flow.check_flow_time(tau_a)
        flow.check_flow_time(tau_v)
        tau_a = np.broadcast_to(np.asarray(tau_a, dtype=np.float64), (b,))
        tau_v = np.broadcast_to(np.asarray(tau_v, dtype=np.float64), (b,))

        tok_q = self.proprio_in(Tensor(np.asarray(q_norm, dtype=np.float32)))
        if mask_flags is not None:
            flags = np.asarray(mask_flags, dtype=np.float32).reshape(b, 1)
            tok_q = tok_q * (1.0 - flags) + self.mask_token.reshape(1, -1) * flags
        tok_a = self.action_in(Tensor(np.asarray(a_noisy, dtype=np.float32))
                               if not isinstance(a_noisy, Tensor) else a_noisy)
        x = Tensor.concat([tok_q.reshape(b, 1, cfg.d), tok_a], axis=1) + self.pos_emb

        if not isinstance(hidden, Tensor):
            hidden = Tensor(np.asarray(hidden, dtype=np.float32))
        cond = self.time_cond(tau_v, tau_a)
        for block in self.blocks:
            x = block(x, hidden, cond)
        vel = self.head(self.head_norm(x[:, 1:, :]))
        return vel


class ChunkSample(NamedTuple):
    actions: np.ndarray          # (B, h_a, d_a) raw environment units
    backbone_forwards: int       # field evaluations + the extraction pass
    wall_time: float


def decode_action_chunk(decoder, hidden, q_raw, tau_v, n_action_steps, rng,
                        force_mask=False):
    """Integrate the action flow from pure noise to tau_a=0 given fixed
    conditioning; returns raw environment-unit actions."""
    b = hidden.shape[0]
    cfg = decoder.cfg
    q_norm = normalize_proprio(q_raw)
    flags = np.ones(b, dtype=np.float32) if force_mask else None
    eps_a = rng.standard_normal((b, cfg.h_a, cfg.d_a), dtype=np.float32)
    with no_grad():
        def field(a, tau):
            return decoder.forward(a, q_norm, hidden, tau, tau_v,
                                   mask_flags=flags).data

        a0_norm = flow.integrate(field, eps_a, 1.0, 0.0, n_action_steps)
    return denormalize_actions(a0_norm)


def sample_action_chunk(backbone, decoder, z_past, q_raw, task_ids, tau_v,
                        n_video_steps, n_action_steps, rng, force_mask=False):
    """Draw one action chunk: partial video denoise, one hidden-state
    extraction, then a full action-flow integration from tau_a=1 to 0.

    At tau_v == 1 the backbone runs exactly once (the extraction pass)."""
    t0 = time.perf_counter()
    before = backbone.forward_calls
    with no_grad():
        z_tau = backbone.partial_denoise(z_past, task_ids, tau_v, n_video_steps, rng)
        hidden = backbone.hidden_states(z_past, z_tau, task_ids, tau_v).data
    actions = decode_action_chunk(decoder, hidden, q_raw, tau_v, n_action_steps,
                                  rng, force_mask=force_mask)
    return ChunkSample(actions=actions,
                       backbone_forwards=backbone.forward_calls - before,
                       wall_time=time.perf_counter() - t0)


def oracle_hidden(backbone, future_frames, z_past, task_ids, tau_v, rng):
    """Hidden states computed from ground-truth future frames noised to tau_v,
    bypassing generation entirely (offline conditioning studies)."""
    cfg = backbone.cfg
    frames = np.asarray(future_frames)
    b = frames.shape[0]
    z0 = backbone.tokenizer.encode(
        frames.reshape(b * cfg.h_f, cfg.frame, cfg.frame, 3))
    z0 = z0.reshape(b, cfg.h_f, cfg.tokens_per_frame, cfg.channels)
    return oracle_hidden_from_latents(backbone, z0, z_past, task_ids, tau_v, rng)


def oracle_hidden_from_latents(backbone, z0_future, z_past, task_ids, tau_v, rng):
    eps = rng.standard_normal(z0_future.shape, dtype=np.float32)
    z_tau = flow.interpolate(z0_future, eps, tau_v)
    with no_grad():
        return backbone.hidden_states(z_past, z_tau, task_ids, tau_v).data


def draw_flow_times(time_dist_v, time_dist_a, size, rng):
    """Independent per-sample flow-time draws for the two models."""
    tau_v = time_dist_v.sample(rng, size)
    tau_a = time_dist_a.sample(rng, size)
    return tau_v, tau_a


def train_decoder_step(decoder, backbone, opt, batch, time_dist_v, time_dist_a,
                       rng, collect=None):
    """One decoder flow-matching step against a frozen backbone.

    Draws independent (tau_v, tau_a), noises ground-truth future latents and
    actions, extracts hidden states without building a graph, applies the
    proprio mask Bernoulli, regresses the decoder velocity, and steps the
    optimizer (decoder parameters only)."""
    if any(p.requires_grad for p in backbone.parameters()):
        raise flow.ContractViolation("backbone must be frozen during decoder training")
    cfg = decoder.cfg
    b = batch["ctx"].shape[0]
    tau_v, tau_a = draw_flow_times(time_dist_v, time_dist_a, b, rng)
    eps_v = rng.standard_normal(batch["fut"].shape, dtype=np.float32)
    z_tau = flow.interpolate(batch["fut"], eps_v, tau_v[:, None, None, None])
    with no_grad():
        hidden = backbone.hidden_states(batch["ctx"], z_tau, batch["task_ids"],
                                        tau_v).data
    a0 = batch["actions"]
    eps_a = rng.standard_normal(a0.shape, dtype=np.float32)
    a_tau = flow.interpolate(a0, eps_a, tau_a[:, None, None])
    mask = (rng.random(b) < cfg.p_mask).astype(np.float32)
    vel = decoder.forward(a_tau, batch["proprio"], hidden, tau_a, tau_v,
                          mask_flags=mask)
    loss = flow.cfm_loss(vel, flow.conditional_target(a0, eps_a))
    loss.backward()
    opt.step()
    decoder.zero_grad()
    if collect is not None:
        collect.append((tau_v, tau_a))
    return float(loss.data)


def train_baseline_step(encoder, decoder, opt, batch, time_dist_a, rng):
    """Context-only baseline: the same encoder architecture evaluated with
    future tokens held at pure noise and tau_v fixed to 1, trained end-to-end
    with the action flow loss only (no generative video objective)."""
    cfg = decoder.cfg
    b = batch["ctx"].shape[0]
    tau_a = time_dist_a.sample(rng, b)
    z_noise = rng.standard_normal(batch["fut"].shape, dtype=np.float32)
    hidden = encoder.hidden_states(batch["ctx"], z_noise, batch["task_ids"], 1.0)
    a0 = batch["actions"]
    eps_a = rng.standard_normal(a0.shape, dtype=np.float32)
    a_tau = flow.interpolate(a0, eps_a, tau_a[:, None, None])
    mask = (rng.random(b) < cfg.p_mask).astype(np.float32)
    vel = decoder.forward(a_tau, batch["proprio"], hidden, tau_a, 1.0,
                          mask_flags=mask)
    loss = flow.cfm_loss(vel, flow.conditional_target(a0, eps_a))
    loss.backward()
    opt.step()
    encoder.zero_grad()
    decoder.zero_grad()
    return float(loss.data)
