"""Episode records, the .epz on-disk format, dataset generation, and the
window view used by training.

.epz layout: magic "VAMEP01\\0", u32 little-endian JSON header length, JSON
header {task_id, n_steps, frame_h, frame_w, action_dim, proprio_dim, seed,
success}, then contiguous little-endian float32 arrays in order: frames
(n_steps+1, H, W, 3), proprio (n_steps+1, 3), actions (n_steps, 3), row-major.

Only successful expert episodes are kept. Episodes execute the float32-cast
expert actions, so replaying a stored action stream through the environment
reproduces the stored proprio stream exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import env as world
from .tokenizer import LatentTokenizer

EPZ_MAGIC = b"VAMEP01\x00"

# Fixed affine normalization into roughly [-1, 1] model space.
ACTION_SCALE = np.array([world.STEP_MAX, world.STEP_MAX, 1.0], dtype=np.float32)


def normalize_actions(a):
    a = np.asarray(a, dtype=np.float32)
    out = a / ACTION_SCALE
    out = out.copy()
    out[..., 2] = 2.0 * a[..., 2] - 1.0
    return out


def denormalize_actions(an):
    an = np.asarray(an, dtype=np.float32)
    out = an * ACTION_SCALE
    out = out.copy()
    out[..., 2] = (an[..., 2] + 1.0) / 2.0
    return out


def normalize_proprio(q):
    return (2.0 * np.asarray(q, dtype=np.float32) - 1.0)


PAD_ACTION_NORM = normalize_actions(np.zeros(3, dtype=np.float32))


@dataclass
class EpisodeRecord:
    task_id: int
    seed: int
    frames: np.ndarray     # (n+1, H, W, 3) float32
    proprio: np.ndarray    # (n+1, 3) float32
    actions: np.ndarray    # (n, 3) float32
    success: bool

    @property
    def n_steps(self):
        return self.actions.shape[0]


def write_episode(path, rec: EpisodeRecord):
    header = {
        "task_id": int(rec.task_id),
        "n_steps": int(rec.n_steps),
        "frame_h": int(rec.frames.shape[1]),
        "frame_w": int(rec.frames.shape[2]),
        "action_dim": int(rec.actions.shape[1]),
        "proprio_dim": int(rec.proprio.shape[1]),
        "seed": int(rec.seed),
        "success": bool(rec.success),
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(EPZ_MAGIC)
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        for arr in (rec.frames, rec.proprio, rec.actions):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_episode(path) -> EpisodeRecord:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != EPZ_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (n,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(n).decode("utf-8"))
        blob = f.read()
    n_steps = header["n_steps"]
    h, w = header["frame_h"], header["frame_w"]
    da, dq = header["action_dim"], header["proprio_dim"]
    sizes = [(n_steps + 1) * h * w * 3, (n_steps + 1) * dq, n_steps * da]
    offsets = np.cumsum([0] + sizes) * 4
    frames = np.frombuffer(blob, "<f4", sizes[0], offset=0).reshape(n_steps + 1, h, w, 3)
    proprio = np.frombuffer(blob, "<f4", sizes[1], offset=int(offsets[1])).reshape(n_steps + 1, dq)
    actions = np.frombuffer(blob, "<f4", sizes[2], offset=int(offsets[2])).reshape(n_steps, da)
    return EpisodeRecord(task_id=header["task_id"], seed=header["seed"],
                         frames=frames.copy(), proprio=proprio.copy(),
                         actions=actions.copy(), success=header["success"])


def run_expert_episode(task, seed, max_steps=100):
    """Roll the scripted expert; returns a record, or None if it failed.

    The executed action is the float32 cast of the expert output, matching
    what gets stored, so stored streams replay bit-exactly.
    """
    state = world.reset(task, seed)
    expert = world.ScriptedExpert(task, np.random.default_rng([int(seed), task.task_id, 7]))
    frames = [world.render(state)]
    proprio = [state.proprio().astype(np.float32)]
    actions = []
    won = False
    for _ in range(max_steps):
        a32 = expert.action(state).astype(np.float32)
        state = world.step(state, a32.astype(np.float64))
        actions.append(a32)
        frames.append(world.render(state))
        proprio.append(state.proprio().astype(np.float32))
        if world.success(state, task):
            won = True
            break
    if not won:
        return None
    return EpisodeRecord(task_id=task.task_id, seed=seed,
                         frames=np.stack(frames), proprio=np.stack(proprio),
                         actions=np.stack(actions), success=True)


def episode_seed(base_seed, task_id, attempt):
    return ((base_seed * 1000003 + task_id) * 1000003 + attempt) % (2**31)


def generate_dataset(tasks, n_episodes_per_task, seed, out_dir, patch=8,
                     max_steps=100):
    """Write one .epz per successful episode plus a manifest carrying counts,
    per-task files and the tokenizer normalization constants."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probe = LatentTokenizer(patch=patch, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))
    pooled = []
    per_task = {}
    for task in tasks:
        files = []
        attempt = 0
        while len(files) < n_episodes_per_task:
            ep_seed = episode_seed(seed, task.task_id, attempt)
            attempt += 1
            if attempt > 20 * n_episodes_per_task:
                raise RuntimeError(f"expert keeps failing on task {task.task_id}")
            rec = run_expert_episode(task, ep_seed, max_steps=max_steps)
            if rec is None:
                continue
            name = f"ep_t{task.task_id:02d}_e{len(files):03d}.epz"
            write_episode(out / name, rec)
            files.append(name)
            pooled.append(probe.encode(rec.frames).reshape(-1, 3).astype(np.float64))
        per_task[str(task.task_id)] = files
    allz = np.concatenate(pooled, axis=0)
    tokenizer = LatentTokenizer(patch=patch, mean=tuple(allz.mean(axis=0)),
                                std=tuple(np.maximum(allz.std(axis=0), 1e-3)))
    manifest = {
        "format": "vam-dataset-v1",
        "seed": int(seed),
        "episodes_per_task": int(n_episodes_per_task),
        "n_episodes": int(sum(len(v) for v in per_task.values())),
        "task_ids": [t.task_id for t in tasks],
        "tasks": per_task,
        "frame_h": world.FRAME,
        "frame_w": world.FRAME,
        "tokenizer": tokenizer.to_json(),
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
    return manifest


def load_manifest(dataset_dir):
    with open(Path(dataset_dir) / "manifest.json") as f:
        return json.load(f)


def manifest_files(manifest, fraction=1.0):
    """Per-task nested prefix subsets: smaller fractions are subsets of larger."""
    out = {}
    for tid, files in manifest["tasks"].items():
        n = max(1, int(round(fraction * len(files))))
        out[tid] = files[:n]
    return out


@dataclass
class EpisodeTensors:
    task_id: int
    latents: np.ndarray        # (n+1, tokens, 3) float32
    proprio_norm: np.ndarray   # (n+1, 3)
    actions_ext: np.ndarray    # (n + pad, 3) normalized, zero-action padded
    n_steps: int


class WindowDataset:
    """Aligned (context latents, future latents, proprio, action chunk)
    windows over a set of episodes.

    A window at step t uses context frames [t-h_o+1 .. t] (start repeat-
    padded), future frames [t+1 .. t+h_f] (end repeat-padded), the proprio at
    t and the normalized action chunk [t .. t+h_a-1] (zero-action padded).
    """

    def __init__(self, episodes, tokenizer, h_o, h_f, h_a):
        self.h_o, self.h_f, self.h_a = h_o, h_f, h_a
        self.episodes = []
        self.index = []
        for rec in episodes:
            lat = tokenizer.encode(rec.frames)
            anorm = normalize_actions(rec.actions)
            ext = np.concatenate(
                [anorm, np.tile(PAD_ACTION_NORM, (h_a, 1))], axis=0)
            ep = EpisodeTensors(task_id=rec.task_id, latents=lat,
                                proprio_norm=normalize_proprio(rec.proprio),
                                actions_ext=ext.astype(np.float32),
                                n_steps=rec.n_steps)
            e = len(self.episodes)
            self.episodes.append(ep)
            self.index.extend((e, t) for t in range(rec.n_steps))
        self.tokens = self.episodes[0].latents.shape[1]

    def __len__(self):
        return len(self.index)

    def window(self, e, t):
        ep = self.episodes[e]
        n = ep.n_steps
        ctx_idx = np.clip(np.arange(t - self.h_o + 1, t + 1), 0, n)
        fut_idx = np.clip(np.arange(t + 1, t + 1 + self.h_f), 0, n)
        act_idx = np.arange(t, t + self.h_a)
        return {
            "ctx": ep.latents[ctx_idx],
            "fut": ep.latents[fut_idx],
            "proprio": ep.proprio_norm[t],
            "actions": ep.actions_ext[act_idx],
            "task_id": ep.task_id,
        }

    def batch(self, rng, size):
        picks = rng.integers(0, len(self.index), size=size)
        ws = [self.window(*self.index[int(i)]) for i in picks]
        return {
            "ctx": np.stack([w["ctx"] for w in ws]),
            "fut": np.stack([w["fut"] for w in ws]),
            "proprio": np.stack([w["proprio"] for w in ws]),
            "actions": np.stack([w["actions"] for w in ws]),
            "task_ids": np.array([w["task_id"] for w in ws], dtype=np.int64),
        }


def load_episodes(dataset_dir, fraction=1.0, manifest=None):
    manifest = manifest or load_manifest(dataset_dir)
    files = manifest_files(manifest, fraction)
    episodes = []
    for tid in sorted(files, key=int):
        for name in files[tid]:
            episodes.append(read_episode(Path(dataset_dir) / name))
    return episodes, manifest
