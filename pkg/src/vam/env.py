"""Deterministic 2D pick-and-place world with a scripted multimodal expert.

The arena is the unit square. A gripper moves by bounded displacements,
grasps the nearest object within reach, and places it on goal zones. Frames
are rendered at 32x32 with sub-pixel (coverage-weighted) rasterization so
continuous positions survive aggressive patch pooling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FRAME = 32
STEP_MAX = 0.08          # displacement cap per step (2-norm)
GRASP_RADIUS = 0.05
SUCCESS_RADIUS = 0.06
MIN_SEPARATION = 0.15
PLACE_MARGIN = 0.12      # keep entity centers away from the arena border
EXPERT_GAIN = 0.3
EXPERT_TOL = 0.015

COLOR_NAMES = ("red", "green", "blue", "yellow")
OBJECT_COLORS = np.array([
    (0.95, 0.15, 0.15),
    (0.15, 0.90, 0.20),
    (0.25, 0.45, 0.95),
    (0.95, 0.90, 0.20),
])
ZONE_NAMES = ("amber zone", "violet zone")
ZONE_COLORS = np.array([
    (0.45, 0.30, 0.08),
    (0.30, 0.10, 0.45),
])
BACKGROUND = np.array((0.06, 0.06, 0.08))
GRIPPER_OPEN = np.array((0.95, 0.95, 0.95))
GRIPPER_CLOSED = np.array((1.00, 0.65, 0.25))

OBJECT_SIZE_PX = 3.0
ZONE_SIZE_PX = 7.0
CROSS_ARM_PX = 7.0
CROSS_BAR_PX = 1.4
# Soft radial glow around every entity. A halo wider than the tokenizer patch
# always straddles patch boundaries, so average-pooled latents keep sub-patch
# positions; without it a 3x3 object inside one 8x8 patch loses its offset
# and the grasp radius becomes unreachable for any decoder.
HALO_RADIUS_PX = 4.5
HALO_ALPHA = 0.5


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    color: int                  # object color id the instruction designates
    goal_zones: tuple           # accepted zone ids; len > 1 means multimodal
    success_radius: float = SUCCESS_RADIUS

    @property
    def multimodal(self):
        return len(self.goal_zones) > 1

    @property
    def instruction(self):
        zone = "any zone" if self.multimodal else ZONE_NAMES[self.goal_zones[0]]
        return f"put {COLOR_NAMES[self.color]} block on {zone}"


# Family A: broad single-goal corpus for video pretraining.
# Family B: two held-out color/zone pairings plus two multimodal tasks;
# used for decoder training and every policy evaluation.
FAMILY_A = (
    TaskSpec(0, color=0, goal_zones=(0,)),
    TaskSpec(1, color=0, goal_zones=(1,)),
    TaskSpec(2, color=1, goal_zones=(0,)),
    TaskSpec(3, color=1, goal_zones=(1,)),
    TaskSpec(4, color=2, goal_zones=(0,)),
    TaskSpec(5, color=3, goal_zones=(1,)),
)
FAMILY_B = (
    TaskSpec(6, color=2, goal_zones=(1,)),
    TaskSpec(7, color=3, goal_zones=(0,)),
    TaskSpec(8, color=0, goal_zones=(0, 1)),
    TaskSpec(9, color=1, goal_zones=(0, 1)),
)
ALL_TASKS = FAMILY_A + FAMILY_B
N_TASKS = len(ALL_TASKS)


def task_by_id(task_id):
    for t in ALL_TASKS:
        if t.task_id == task_id:
            return t
    raise KeyError(f"unknown task id {task_id}")


def family_tasks(name):
    if name == "A":
        return FAMILY_A
    if name == "B":
        return FAMILY_B
    raise KeyError(f"unknown family {name!r}")


@dataclass(frozen=True)
class WorldState:
    gripper: np.ndarray               # (2,)
    grasp: int
    objects: tuple                    # ((x, y) ndarray, color_id) pairs
    held: int | None
    zones: np.ndarray                 # (2, 2): zone id -> center

    def proprio(self):
        return np.array([self.gripper[0], self.gripper[1], float(self.grasp)])

    def object_of_color(self, color):
        for i, (_, c) in enumerate(self.objects):
            if c == color:
                return i
        return None


def reset(task: TaskSpec, seed: int) -> WorldState:
    """Deterministic scene: both zones, the target object, 1-2 distractors,
    and the gripper, all separated by at least MIN_SEPARATION."""
    rng = np.random.default_rng([int(seed), task.task_id])
    placed = []

    def place():
        for _ in range(1000):
            p = rng.uniform(PLACE_MARGIN, 1.0 - PLACE_MARGIN, size=2)
            if all(np.linalg.norm(p - q) >= MIN_SEPARATION for q in placed):
                placed.append(p)
                return p
        raise EnvError("placement failed after 1000 rejections")

    zones = np.stack([place(), place()])
    n_objects = int(rng.integers(2, 4))
    distract = [c for c in range(len(COLOR_NAMES)) if c != task.color]
    rng.shuffle(distract)
    colors = [task.color] + distract[: n_objects - 1]
    objects = tuple((place(), c) for c in colors)
    gripper = place()
    return WorldState(gripper=gripper, grasp=0, objects=objects, held=None, zones=zones)


def step(state: WorldState, action) -> WorldState:
    """Apply (dx, dy, g). Order: a release takes effect before the move (a
    dropped object stays put), a grasp attempt happens after the move."""
    a = np.asarray(action, dtype=np.float64)
    d = a[:2].copy()
    norm = float(np.linalg.norm(d))
    if norm > STEP_MAX:
        d *= STEP_MAX / norm
    close = a[2] >= 0.5

    held = state.held
    if not close:
        held = None

    gripper = np.clip(state.gripper + d, 0.0, 1.0)
    objects = list(state.objects)
    if held is not None:
        objects[held] = (gripper.copy(), objects[held][1])

    grasp = 0
    if close:
        grasp = 1
        if held is None:
            dists = [float(np.linalg.norm(pos - gripper)) for pos, _ in objects]
            best = int(np.argmin(dists))
            if dists[best] <= GRASP_RADIUS:
                held = best
                objects[best] = (gripper.copy(), objects[best][1])

    return WorldState(gripper=gripper, grasp=grasp, objects=tuple(objects),
                      held=held, zones=state.zones)


def success(state: WorldState, task: TaskSpec) -> bool:
    """The designated object rests within the success radius of an accepted
    zone and is not held."""
    idx = state.object_of_color(task.color)
    if idx is None or state.held == idx:
        return False
    pos = state.objects[idx][0]
    return any(np.linalg.norm(pos - state.zones[z]) <= task.success_radius
               for z in task.goal_zones)


class ScriptedExpert:
    """Proportional pick-and-place controller.

    Phases: approach object -> grasp -> carry to goal -> release. For
    multimodal tasks the goal is drawn once per episode from the supplied
    generator, making the demonstration distribution multimodal given the
    first frame.
    """

    def __init__(self, task: TaskSpec, rng):
        self.task = task
        self.rng = rng
        self.goal_zone = None

    def _choose_goal(self, state):
        if self.goal_zone is None:
            zones = self.task.goal_zones
            self.goal_zone = int(zones[self.rng.integers(len(zones))]) if len(zones) > 1 \
                else int(zones[0])
        return state.zones[self.goal_zone]

    def action(self, state: WorldState) -> np.ndarray:
        idx = state.object_of_color(self.task.color)
        if idx is None:
            raise EnvError(f"state has no object of color {self.task.color}")
        if success(state, self.task):
            return np.array([0.0, 0.0, 0.0])  # idle once the task is done
        if state.held == idx:
            delta = self._choose_goal(state) - state.gripper
            dist = float(np.linalg.norm(delta))
            if dist > EXPERT_TOL:
                return np.array([*_clip_step(EXPERT_GAIN * delta), 1.0])
            return np.array([0.0, 0.0, 0.0])  # release on the goal
        delta = state.objects[idx][0] - state.gripper
        dist = float(np.linalg.norm(delta))
        if dist > EXPERT_TOL:
            return np.array([*_clip_step(EXPERT_GAIN * delta), 0.0])
        return np.array([*delta, 1.0])  # settle the residual offset and grasp


def _clip_step(d):
    n = float(np.linalg.norm(d))
    if n > STEP_MAX:
        return d * (STEP_MAX / n)
    return d


def expert_action(state: WorldState, task: TaskSpec, rng) -> np.ndarray:
    """One-shot functional wrapper (single-goal tasks only need this form)."""
    return ScriptedExpert(task, rng).action(state)


# ------------------------------------------------------------------ renderer


def _paint_rect(img, cx, cy, w, h, color):
    """Composite an axis-aligned rect (pixel units, center cx/cy) with
    per-pixel coverage as alpha."""
    x0, x1 = cx - w / 2.0, cx + w / 2.0
    y0, y1 = cy - h / 2.0, cy + h / 2.0
    px0, px1 = max(int(np.floor(x0)), 0), min(int(np.ceil(x1)), FRAME)
    py0, py1 = max(int(np.floor(y0)), 0), min(int(np.ceil(y1)), FRAME)
    if px0 >= px1 or py0 >= py1:
        return
    xs = np.arange(px0, px1)
    ys = np.arange(py0, py1)
    cov_x = np.clip(np.minimum(xs + 1.0, x1) - np.maximum(xs, x0), 0.0, 1.0)
    cov_y = np.clip(np.minimum(ys + 1.0, y1) - np.maximum(ys, y0), 0.0, 1.0)
    cov = np.outer(cov_y, cov_x)[:, :, None]
    region = img[py0:py1, px0:px1]
    region *= 1.0 - cov
    region += cov * color


def _paint_halo(img, cx, cy, color, radius=HALO_RADIUS_PX, alpha=HALO_ALPHA):
    """Radial glow with linear falloff, sampled at pixel centers."""
    px0, px1 = max(int(np.floor(cx - radius)), 0), min(int(np.ceil(cx + radius)) + 1, FRAME)
    py0, py1 = max(int(np.floor(cy - radius)), 0), min(int(np.ceil(cy + radius)) + 1, FRAME)
    if px0 >= px1 or py0 >= py1:
        return
    xs = np.arange(px0, px1) + 0.5
    ys = np.arange(py0, py1) + 0.5
    r = np.sqrt((xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2)
    a = alpha * np.clip(1.0 - r / radius, 0.0, 1.0)[:, :, None]
    region = img[py0:py1, px0:px1]
    region *= 1.0 - a
    region += a * color


def render(state: WorldState) -> np.ndarray:
    """Rasterize a state to a float32 (32, 32, 3) frame in [0, 1]."""
    img = np.empty((FRAME, FRAME, 3), dtype=np.float64)
    img[:] = BACKGROUND
    for z in range(2):
        cx, cy = state.zones[z] * FRAME
        _paint_halo(img, cx, cy, ZONE_COLORS[z], radius=5.5, alpha=0.35)
        _paint_rect(img, cx, cy, ZONE_SIZE_PX, ZONE_SIZE_PX, ZONE_COLORS[z])
    for pos, color in state.objects:
        cx, cy = pos * FRAME
        _paint_halo(img, cx, cy, OBJECT_COLORS[color])
        _paint_rect(img, cx, cy, OBJECT_SIZE_PX, OBJECT_SIZE_PX, OBJECT_COLORS[color])
    gx, gy = state.gripper * FRAME
    tint = GRIPPER_CLOSED if state.grasp else GRIPPER_OPEN
    _paint_halo(img, gx, gy, tint, radius=5.0, alpha=0.4)
    _paint_rect(img, gx, gy, CROSS_ARM_PX, CROSS_BAR_PX, tint)
    _paint_rect(img, gx, gy, CROSS_BAR_PX, CROSS_ARM_PX, tint)
    return np.clip(img, 0.0, 1.0).astype(np.float32)
