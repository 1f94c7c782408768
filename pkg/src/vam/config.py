"""Run configuration: nested dataclasses, JSON round-trip, CLI overrides.

A config file is flat per-section JSON, e.g. {"video": {...}, "decoder_train":
{...}}; command-line flags override individual file values. Every command
records the resolved config next to its outputs and stamps CSV files with its
hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .action_model import DecoderConfig
from .video_model import VideoConfig


@dataclass
class DataConfig:
    episodes_per_task_a: int = 100
    episodes_per_task_b: int = 50
    episodes_per_task_heldout: int = 16
    max_expert_steps: int = 100


@dataclass
class VideoTrainConfig:
    steps: int = 3000
    batch: int = 16
    lr: float = 1.778e-4
    schedule: str = "constant"
    warmup: int = 250
    weight_decay: float = 0.1
    clip_norm: float = 10.0
    time_mu: float = 0.0       # logit-normal flow-time law
    time_sigma: float = 1.0
    log_every: int = 25
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_steps: int = 800
    lora_lr: float = 1e-4


@dataclass
class DecoderTrainConfig:
    steps: int = 2200
    batch: int = 16
    lr: float = 1e-4
    baseline_lr: float = 1e-4  # tuned separately per arm (3-point grid)
    schedule: str = "linear"
    warmup: int = 250
    weight_decay: float = 0.1
    clip_norm: float = 10.0
    tau_a_floor: float = 0.001
    ckpt_every: int = 200
    log_every: int = 25
    record_taus: int = 10000


@dataclass
class EvalConfig:
    tau_v: float = 1.0
    n_rollouts: int = 50
    max_steps: int = 80
    n_action_steps: int = 10
    video_steps_full: int = 10


@dataclass
class SweepConfig:
    tau_grid: tuple = (0.2, 0.5, 0.8, 0.95, 1.0)
    mse_grid_points: int = 9
    mse_grid_lo: float = 0.01
    mse_grid_hi: float = 0.99
    mse_windows: int = 256
    fractions: tuple = (0.02, 0.1, 0.25, 0.5, 1.0)


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    video: VideoConfig = field(default_factory=VideoConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    video_train: VideoTrainConfig = field(default_factory=VideoTrainConfig)
    decoder_train: DecoderTrainConfig = field(default_factory=DecoderTrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(_tuples_to_lists(self.to_dict()), sort_keys=True, indent=2)

    def config_hash(self):
        obj = _tuples_to_lists(self.to_dict())
        obj.pop("out", None)  # an output location is not an experiment setting
        payload = json.dumps(obj, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @staticmethod
    def from_dict(obj):
        cfg = RunConfig()
        for section, value in obj.items():
            if not hasattr(cfg, section):
                raise KeyError(f"unknown config section {section!r}")
            current = getattr(cfg, section)
            if dataclasses.is_dataclass(current):
                names = {f.name: f for f in dataclasses.fields(current)}
                for k, v in value.items():
                    if k not in names:
                        raise KeyError(f"unknown field {section}.{k}")
                    if isinstance(getattr(current, k), tuple):
                        v = tuple(v)
                    setattr(current, k, v)
            else:
                setattr(cfg, section, value)
        return cfg

    @staticmethod
    def load(path):
        with open(path) as f:
            return RunConfig.from_dict(json.load(f))


def _tuples_to_lists(obj):
    if isinstance(obj, dict):
        return {k: _tuples_to_lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_tuples_to_lists(v) for v in obj]
    return obj


def logit_spaced_grid(lo, hi, n):
    """n points even in logit space between lo and hi (both in (0, 1))."""
    import numpy as np

    def logit(p):
        return np.log(p / (1.0 - p))

    xs = np.linspace(logit(lo), logit(hi), n)
    return [float(1.0 / (1.0 + np.exp(-x))) for x in xs]
