"""Fixed (non-learned) video tokenizer: patch average-pooling plus dataset
normalization. Being model-free makes ground-truth latents exactly computable
for any frame sequence, which the conditioning studies rely on.

Internals run in float64 so encode -> decode round-trips are exact at
float32 resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STD_FLOOR = 1e-3


@dataclass(frozen=True)
class LatentTokenizer:
    patch: int
    mean: tuple      # per-channel, computed once from a training split
    std: tuple

    def grid(self, frame_hw):
        h, w = frame_hw
        if h % self.patch or w % self.patch:
            raise ValueError(f"frame {frame_hw} not divisible by patch {self.patch}")
        return h // self.patch, w // self.patch

    def tokens_per_frame(self, frame_hw):
        gh, gw = self.grid(frame_hw)
        return gh * gw

    def encode(self, frames):
        """frames (..., H, W, 3) in [0, 1] -> latents (..., tokens, 3), float32."""
        f = np.asarray(frames, dtype=np.float64)
        h, w = f.shape[-3], f.shape[-2]
        gh, gw = self.grid((h, w))
        lead = f.shape[:-3]
        f = f.reshape(*lead, gh, self.patch, gw, self.patch, 3)
        pooled = f.mean(axis=(-4, -2))
        z = (pooled - np.asarray(self.mean)) / np.asarray(self.std)
        return z.reshape(*lead, gh * gw, 3).astype(np.float32)

    def decode(self, latents, frame_hw=(32, 32)):
        """Nearest-neighbor upsampling of de-normalized latents, clamped to [0, 1]."""
        z = np.asarray(latents, dtype=np.float64)
        gh, gw = self.grid(frame_hw)
        lead = z.shape[:-2]
        pooled = z.reshape(*lead, gh, gw, 3) * np.asarray(self.std) + np.asarray(self.mean)
        frames = pooled.repeat(self.patch, axis=-3).repeat(self.patch, axis=-2)
        return np.clip(frames, 0.0, 1.0).astype(np.float32)

    @staticmethod
    def fit(frames, patch):
        """Compute normalization constants (per-channel over pooled tokens)."""
        probe = LatentTokenizer(patch=patch, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))
        z = probe.encode(frames).astype(np.float64).reshape(-1, 3)
        mean = z.mean(axis=0)
        std = np.maximum(z.std(axis=0), STD_FLOOR)
        return LatentTokenizer(patch=patch, mean=tuple(mean), std=tuple(std))

    def to_json(self):
        return {"patch": self.patch, "mean": list(self.mean), "std": list(self.std)}

    @staticmethod
    def from_json(obj):
        return LatentTokenizer(patch=int(obj["patch"]), mean=tuple(obj["mean"]),
                               std=tuple(obj["std"]))
