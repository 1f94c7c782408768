"""Closed-loop evaluation, conditioning studies and sweep curves.

Rollouts run in lockstep batches (one model call serves every active rollout)
which keeps evaluation deterministic for a fixed seed while using the width
of the BLAS. Success-rate standard errors use the binomial formula
sqrt(p (1 - p) / N).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import env as world
from . import flow
from .action_model import decode_action_chunk, oracle_hidden_from_latents
from .autodiff import no_grad
from .dataset import WindowDataset


@dataclass
class TaskResult:
    task_id: int
    n_rollouts: int
    successes: int
    mean_len: float
    backbone_forwards_per_chunk: int
    wall_per_chunk: float

    @property
    def success_rate(self):
        return 100.0 * self.successes / self.n_rollouts if self.n_rollouts else 0.0

    @property
    def stderr(self):
        if not self.n_rollouts:
            return 0.0
        p = self.successes / self.n_rollouts
        return 100.0 * float(np.sqrt(p * (1.0 - p) / self.n_rollouts))


@dataclass
class EvalReport:
    per_task: list = field(default_factory=list)

    @property
    def n_rollouts(self):
        return sum(t.n_rollouts for t in self.per_task)

    @property
    def avg_success_rate(self):
        if not self.per_task:
            return 0.0
        return float(np.mean([t.success_rate for t in self.per_task]))

    @property
    def avg_stderr(self):
        if not self.per_task:
            return 0.0
        return float(np.sqrt(np.sum([t.stderr**2 for t in self.per_task]))
                     / len(self.per_task))

    def rows(self):
        out = []
        for t in self.per_task:
            out.append([t.task_id, t.n_rollouts, t.successes,
                        t.success_rate, t.stderr, t.mean_len,
                        t.backbone_forwards_per_chunk])
        if self.per_task:
            out.append(["avg", self.n_rollouts,
                        sum(t.successes for t in self.per_task),
                        self.avg_success_rate, self.avg_stderr,
                        float(np.mean([t.mean_len for t in self.per_task])),
                        self.per_task[0].backbone_forwards_per_chunk])
        return out


REPORT_HEADER = ["task_id", "n_rollouts", "successes", "success_rate",
                 "stderr", "mean_len", "backbone_forwards_per_chunk"]


class _Rollout:
    __slots__ = ("state", "latents", "steps", "done", "won", "expert")

    def __init__(self, state, tokenizer, expert=None):
        self.state = state
        self.latents = [tokenizer.encode(world.render(state)[None])[0]]
        self.steps = 0
        self.done = False
        self.won = False
        self.expert = expert


def _context(rollout, h_o):
    lats = rollout.latents
    idx = np.clip(np.arange(len(lats) - h_o, len(lats)), 0, None)
    return np.stack([lats[i] for i in idx])


def rollout_seed(seed, task_id, i):
    return ((seed * 9176 + task_id) * 9176 + i) % (2**31)


def run_task_rollouts(backbone, decoder, task, eval_cfg, seed, tau_v=None,
                      conditioning="policy"):
    """Closed-loop chunked control on one task.

    conditioning: "policy" (generate latents by partial denoising) or
    "oracle" (teacher-forced: hidden states from an expert shadow rollout's
    ground-truth future frames, noised to tau_v)."""
    tau_v = eval_cfg.tau_v if tau_v is None else tau_v
    n = eval_cfg.n_rollouts
    h_o, h_f = backbone.cfg.h_o, backbone.cfg.h_f
    h_a = decoder.cfg.h_a
    tok = backbone.tokenizer
    rng = np.random.default_rng([seed, task.task_id, 3])
    rollouts = []
    for i in range(n):
        st = world.reset(task, rollout_seed(seed, task.task_id, i))
        expert = (world.ScriptedExpert(
            task, np.random.default_rng([seed, task.task_id, i, 7]))
            if conditioning == "oracle" else None)
        rollouts.append(_Rollout(st, tok, expert))

    n_video_steps = flow.default_video_steps(tau_v, eval_cfg.video_steps_full)
    forwards_per_chunk = 0
    wall = []
    while True:
        active = [r for r in rollouts if not r.done]
        if not active:
            break
        t0 = time.perf_counter()
        z_past = np.stack([_context(r, h_o) for r in active])
        q = np.stack([r.state.proprio() for r in active])
        ids = np.full(len(active), task.task_id, dtype=np.int64)
        before = backbone.forward_calls
        if conditioning == "oracle":
            z0_fut = np.stack([_shadow_future_latents(r, task, tok, h_f)
                               for r in active])
            hidden = oracle_hidden_from_latents(backbone, z0_fut, z_past, ids,
                                                tau_v, rng)
        else:
            with no_grad():
                z_tau = backbone.partial_denoise(z_past, ids, tau_v,
                                                 n_video_steps, rng)
                hidden = backbone.hidden_states(z_past, z_tau, ids, tau_v).data
        forwards_per_chunk = backbone.forward_calls - before
        actions = decode_action_chunk(decoder, hidden, q, tau_v,
                                      eval_cfg.n_action_steps, rng)
        wall.append((time.perf_counter() - t0) / len(active))
        for r, chunk in zip(active, actions):
            for a in chunk:
                r.state = world.step(r.state, a.astype(np.float64))
                r.steps += 1
                r.latents.append(tok.encode(world.render(r.state)[None])[0])
                if world.success(r.state, task):
                    r.done = r.won = True
                    break
                if r.steps >= eval_cfg.max_steps:
                    r.done = True
                    break
    return TaskResult(
        task_id=task.task_id,
        n_rollouts=n,
        successes=sum(r.won for r in rollouts),
        mean_len=float(np.mean([r.steps for r in rollouts])) if rollouts else 0.0,
        backbone_forwards_per_chunk=forwards_per_chunk,
        wall_per_chunk=float(np.mean(wall)) if wall else 0.0,
    )


def _shadow_future_latents(rollout, task, tok, h_f):
    """Ground-truth future: roll the rollout's own expert forward from the
    current state and encode the rendered frames."""
    sim = rollout.state
    frames = []
    for _ in range(h_f):
        a = rollout.expert.action(sim)
        sim = world.step(sim, a)
        frames.append(world.render(sim))
    return tok.encode(np.stack(frames))


def evaluate_policy(backbone, decoder, tasks, eval_cfg, seed, tau_v=None,
                    conditioning="policy"):
    report = EvalReport()
    for task in tasks:
        report.per_task.append(
            run_task_rollouts(backbone, decoder, task, eval_cfg, seed,
                              tau_v=tau_v, conditioning=conditioning))
    return report


# ------------------------------------------------------------------- curves


def action_mse_curve(backbone, decoder, episodes, tau_grid, eval_cfg, seed,
                     n_windows=256):
    """Open-loop action reconstruction against ground-truth-latent
    conditioning across video flow times. Noise draws are paired across grid
    points, so curve shape is not drowned by sampling variance.

    Returns rows (tau_v, mse, stderr)."""
    cfg = backbone.cfg
    ds = WindowDataset(episodes, backbone.tokenizer, cfg.h_o, cfg.h_f,
                       decoder.cfg.h_a)
    rng = np.random.default_rng([seed, 101])
    picks = rng.integers(0, len(ds.index), size=n_windows)
    ws = [ds.window(*ds.index[int(i)]) for i in picks]
    ctx = np.stack([w["ctx"] for w in ws])
    fut = np.stack([w["fut"] for w in ws])
    q_norm = np.stack([w["proprio"] for w in ws])
    a0 = np.stack([w["actions"] for w in ws])
    ids = np.array([w["task_id"] for w in ws], dtype=np.int64)
    eps_v = rng.standard_normal(fut.shape, dtype=np.float32)
    eps_a = rng.standard_normal(a0.shape, dtype=np.float32)
    rows = []
    for tau_v in tau_grid:
        z_tau = flow.interpolate(fut, eps_v, tau_v)
        with no_grad():
            hidden = backbone.hidden_states(ctx, z_tau, ids, tau_v).data

            def fieldfn(a, tau):
                return decoder.forward(a, q_norm, hidden, tau, tau_v).data

            a_hat = flow.integrate(fieldfn, eps_a, 1.0, 0.0,
                                   eval_cfg.n_action_steps)
        per_window = np.mean((a_hat - a0) ** 2, axis=(1, 2))
        rows.append((float(tau_v), float(per_window.mean()),
                     float(per_window.std(ddof=1) / np.sqrt(n_windows))))
    return rows


def sweep_tau(backbone, decoder, tasks, tau_grid, eval_cfg, seed):
    """Closed-loop success over a tau_v grid; returns per-tau rows and the
    per-task argmax rows."""
    rows = []
    reports = {}
    for tau_v in tau_grid:
        rep = evaluate_policy(backbone, decoder, tasks, eval_cfg, seed,
                              tau_v=tau_v)
        reports[tau_v] = rep
        for t in rep.per_task:
            rows.append((float(tau_v), t.task_id, t.success_rate, t.stderr))
        rows.append((float(tau_v), "avg", rep.avg_success_rate, rep.avg_stderr))
    best_rows = []
    for i, task in enumerate(tasks):
        srs = [(reports[tv].per_task[i].success_rate, float(tv)) for tv in tau_grid]
        best_sr, best_tv = max(srs)
        best_rows.append((task.task_id, best_tv, best_sr))
    return rows, best_rows


def latency_probe(backbone, decoder, task, eval_cfg, seed, tau_values=(1.0, 0.0),
                  repeats=3):
    """Single-rollout per-chunk wall-clock at different video flow times."""
    from .action_model import sample_action_chunk

    st = world.reset(task, rollout_seed(seed, task.task_id, 0))
    tok = backbone.tokenizer
    lat = tok.encode(world.render(st)[None])[0]
    z_past = np.stack([np.stack([lat] * backbone.cfg.h_o)])
    q = st.proprio()[None]
    out = {}
    for tau_v in tau_values:
        steps = flow.default_video_steps(tau_v, eval_cfg.video_steps_full)
        rng = np.random.default_rng([seed, 77])
        sample_action_chunk(backbone, decoder, z_past, q,
                            np.array([task.task_id]), tau_v, steps,
                            eval_cfg.n_action_steps, rng)  # warm
        times = []
        forwards = None
        for _ in range(repeats):
            chunk = sample_action_chunk(backbone, decoder, z_past, q,
                                        np.array([task.task_id]), tau_v, steps,
                                        eval_cfg.n_action_steps, rng)
            times.append(chunk.wall_time)
            forwards = chunk.backbone_forwards
        out[tau_v] = (min(times), forwards)
    return out
