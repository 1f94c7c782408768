"""AdamW with global-norm gradient clipping, linear warmup and LR schedules.

State (moments, step count) is float32 like the parameters so a saved and
reloaded training run continues bit-exactly.
"""

from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, named_params, lr, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.1, clip_norm=10.0, warmup_steps=1000,
                 total_steps=None, schedule="constant"):
        if schedule not in ("constant", "linear"):
            raise ValueError(f"unknown schedule {schedule!r}")
        if schedule == "linear" and not total_steps:
            raise ValueError("linear schedule needs total_steps")
        self.params = [(name, p) for name, p in named_params if p.trainable]
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.clip_norm = float(clip_norm) if clip_norm else None
        self.warmup_steps = int(warmup_steps)
        self.total_steps = int(total_steps) if total_steps else None
        self.schedule = schedule
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def lr_at(self, step):
        warm = min(step / self.warmup_steps, 1.0) if self.warmup_steps > 0 else 1.0
        if self.schedule == "linear":
            sched = max(0.0, 1.0 - step / self.total_steps)
        else:
            sched = 1.0
        return self.lr * warm * sched

    def clip_gradients(self):
        """Scale all gradients so their global norm is at most clip_norm.

        Returns the pre-clip global norm.
        """
        sq = 0.0
        for _, p in self.params:
            if p.grad is not None:
                sq += float(np.vdot(p.grad, p.grad))
        norm = float(np.sqrt(sq))
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = np.float32(self.clip_norm / norm)
            for _, p in self.params:
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self):
        self.step_count += 1
        t = self.step_count
        grad_norm = self.clip_gradients()
        lr_t = np.float32(self.lr_at(t))
        bc1 = np.float32(1.0 - self.beta1 ** t)
        bc2 = np.float32(1.0 - self.beta2 ** t)
        b1 = np.float32(self.beta1)
        b2 = np.float32(self.beta2)
        wd = np.float32(self.weight_decay)
        eps = np.float32(self.eps)
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            if wd != 0:
                p.data -= lr_t * wd * p.data
            p.data -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + eps)
        return grad_norm

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    # ------------------------------------------------------------ resumption

    def state_arrays(self):
        """Optimizer state as named float32 arrays (checkpointable)."""
        out = [("optim.step", np.array([self.step_count], dtype=np.float32))]
        for name, _ in self.params:
            out.append((f"optim.m.{name}", self.m[name]))
            out.append((f"optim.v.{name}", self.v[name]))
        return out

    def load_state_arrays(self, arrays):
        self.step_count = int(arrays["optim.step"][0])
        for name, _ in self.params:
            self.m[name] = np.array(arrays[f"optim.m.{name}"], dtype=np.float32)
            self.v[name] = np.array(arrays[f"optim.v.{name}"], dtype=np.float32)
