"""Procedural 2D manipulation benchmark with analytic ground truth.

A scene is a set of colored squares plus a gripper on an integer grid. The
instruction names one object's color; the expert controller walks the
gripper to that object's center with per-axis capped steps and closes the
grip once inside the target box. Everything is a pure function of
(episode id, world config), so regeneration is schedule-independent.

All geometry uses integer centers and half-sizes in canonical grid units,
which keeps pixel-center rasterization consistent across render scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .tensor import ContractViolation


class GenerationError(RuntimeError):
    """Scene placement failed after bounded retries."""


# color_id -> RGB; the palette is fixed so instruction ids are stable.
PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],  # red
        [0.10, 0.80, 0.15],  # green
        [0.15, 0.25, 0.90],  # blue
        [0.90, 0.85, 0.10],  # yellow
        [0.85, 0.15, 0.80],  # magenta
        [0.10, 0.80, 0.85],  # cyan
        [0.95, 0.55, 0.10],  # orange
        [0.50, 0.20, 0.75],  # purple
    ],
    dtype=np.float32,
)
BACKGROUND = np.array([0.08, 0.08, 0.10], dtype=np.float32)
GRIPPER_COLOR = np.array([1.0, 1.0, 1.0], dtype=np.float32)
GRIPPER_HALF_SIZE = 2

# language token ids: colors occupy 0..7, then sequence delimiters
TOKEN_BEGIN = len(PALETTE)
TOKEN_END = len(PALETTE) + 1
VOCAB_SIZE = len(PALETTE) + 2
INSTRUCTION_LENGTH = 3


def instruction_tokens(color_id: int) -> np.ndarray:
    return np.array([TOKEN_BEGIN, color_id, TOKEN_END], dtype=np.int64)


@dataclass(frozen=True)
class WorldConfig:
    grid_extent: int = 64
    num_objects: int = 3
    half_size_min: int = 3
    half_size_max: int = 6
    backbone_resolution: int = 64
    expert_resolution: int = 128
    patch_size: int = 8
    merge: int = 2  # 2x2 patch merge in the backbone encoder
    horizon: int = 8
    step_cap: float = 8.0
    action_dim: int = 3
    palette_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not (2 <= self.num_objects <= self.palette_size):
            raise ContractViolation("num_objects must lie in [2, palette_size]")
        if self.palette_size > len(PALETTE):
            raise ContractViolation(f"palette_size > {len(PALETTE)} unsupported")
        for res in (self.backbone_resolution, self.expert_resolution):
            if res % self.grid_extent:
                raise ContractViolation("resolutions must be multiples of grid_extent")
            if res % self.patch_size:
                raise ContractViolation("resolutions must be divisible by patch_size")

    @property
    def backbone_cell(self) -> int:
        """Effective backbone visual-token cell in pixels (patch after merge)."""
        return self.patch_size * self.merge


@dataclass(frozen=True)
class SceneObject:
    color_id: int
    center: tuple[int, int]  # (x, y) in grid units
    half_size: int


@dataclass(frozen=True)
class Scene:
    grid_extent: int
    objects: tuple[SceneObject, ...]
    gripper_start: tuple[int, int]

    def object_by_color(self, color_id: int) -> SceneObject:
        for obj in self.objects:
            if obj.color_id == color_id:
                return obj
        raise ContractViolation(f"no object with color {color_id} in scene")


@dataclass(frozen=True)
class ActionChunk:
    """Horizon x action_dim rows, components in [-1, 1], grip in {-1, +1}."""

    steps: np.ndarray

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=np.float32)
        object.__setattr__(self, "steps", steps)
        if steps.ndim != 2:
            raise ContractViolation("action chunk must be 2-D")

    @property
    def horizon(self) -> int:
        return self.steps.shape[0]


@dataclass
class Episode:
    id: int
    scene: Scene
    instruction: int  # color_id of the target object
    frame_backbone: np.ndarray  # (H, W, 3) float32 in [0, 1]
    frame_expert: np.ndarray
    actions: ActionChunk
    roi_backbone: tuple[int, ...]  # merged-token indices at backbone scale
    roi_expert: tuple[int, ...]  # patch-token indices at expert scale


def _boxes_clear(ax, ay, ahs, bx, by, bhs, gap: int) -> bool:
    return max(abs(ax - bx) - (ahs + bhs), abs(ay - by) - (ahs + bhs)) >= gap


def _try_place_objects(rng, world: WorldConfig, colors) -> list[SceneObject] | None:
    g = world.grid_extent
    objects: list[SceneObject] = []
    for color in colors:
        hs = int(rng.integers(world.half_size_min, world.half_size_max + 1))
        lo, hi = hs + 2, g - hs - 2
        for _ in range(50):
            cx = int(rng.integers(lo, hi + 1))
            cy = int(rng.integers(lo, hi + 1))
            if all(
                _boxes_clear(cx, cy, hs, o.center[0], o.center[1], o.half_size, 2)
                for o in objects
            ):
                objects.append(SceneObject(int(color), (cx, cy), hs))
                break
        else:
            return None
    return objects


def generate_scene(rng_seed, world: WorldConfig) -> Scene:
    """Deterministic scene from a seed; raises GenerationError if placement
    cannot satisfy the non-overlap constraints within bounded retries.

    Placement restarts the whole scene when an object cannot fit, so an
    unlucky early placement never wedges the rest.
    """
    rng = np.random.default_rng(rng_seed)
    g = world.grid_extent
    colors = rng.choice(world.palette_size, size=world.num_objects, replace=False)
    objects = None
    for _ in range(100):
        objects = _try_place_objects(rng, world, colors)
        if objects is not None:
            break
    if objects is None:
        raise GenerationError(
            f"could not place {world.num_objects} objects after 100 scene restarts "
            f"(seed {rng_seed})"
        )
    ghs = GRIPPER_HALF_SIZE
    for _ in range(500):
        gx = int(rng.integers(ghs + 2, g - ghs - 1))
        gy = int(rng.integers(ghs + 2, g - ghs - 1))
        if all(
            _boxes_clear(gx, gy, ghs, o.center[0], o.center[1], o.half_size, 1)
            for o in objects
        ):
            break
    else:
        raise GenerationError(f"could not place gripper (seed {rng_seed})")
    return Scene(grid_extent=g, objects=tuple(objects), gripper_start=(gx, gy))


def render(scene: Scene, resolution: int) -> np.ndarray:
    """Rasterize to (resolution, resolution, 3) float32 via pixel centers.

    Objects are filled axis-aligned squares in palette colors, the gripper
    a filled square in the reserved white marker color, background constant.
    """
    if resolution % scene.grid_extent:
        raise ContractViolation("resolution must be a multiple of grid_extent")
    scale = resolution // scene.grid_extent
    centers = (np.arange(resolution) + 0.5) / scale  # pixel centers, grid units
    xs = centers[None, :]  # column -> x
    ys = centers[:, None]  # row -> y
    img = np.empty((resolution, resolution, 3), dtype=np.float32)
    img[:] = BACKGROUND
    for obj in scene.objects:
        cx, cy = obj.center
        inside = (np.abs(xs - cx) <= obj.half_size) & (np.abs(ys - cy) <= obj.half_size)
        img[inside] = PALETTE[obj.color_id]
    gx, gy = scene.gripper_start
    inside = (np.abs(xs - gx) <= GRIPPER_HALF_SIZE) & (
        np.abs(ys - gy) <= GRIPPER_HALF_SIZE
    )
    img[inside] = GRIPPER_COLOR
    return img


def expert_action(
    scene: Scene, instruction: int, horizon: int, step_cap: float
) -> ActionChunk:
    """Greedy analytic controller toward the instructed object.

    Per step: if the gripper is inside the target box the action is
    (0, 0, +1) and it stays put; otherwise it moves by the per-axis capped
    displacement toward the center (normalized to [-1, 1] by the cap) with
    grip -1.
    """
    target = scene.object_by_color(instruction)
    tx, ty = target.center
    hs = target.half_size
    px, py = float(scene.gripper_start[0]), float(scene.gripper_start[1])
    steps = np.zeros((horizon, 3), dtype=np.float32)
    for t in range(horizon):
        if abs(px - tx) <= hs and abs(py - ty) <= hs:
            steps[t] = (0.0, 0.0, 1.0)
            continue
        dx = min(max(tx - px, -step_cap), step_cap)
        dy = min(max(ty - py, -step_cap), step_cap)
        steps[t] = (dx / step_cap, dy / step_cap, -1.0)
        px += dx
        py += dy
    return ActionChunk(steps)


def _segment_distance(px, py, ax, ay, bx, by):
    """Distance from points (px, py) to segment (a, b); vectorized."""
    vx, vy = bx - ax, by - ay
    seg_len2 = vx * vx + vy * vy
    if seg_len2 == 0.0:
        return np.hypot(px - ax, py - ay)
    t = ((px - ax) * vx + (py - ay) * vy) / seg_len2
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (ax + t * vx), py - (ay + t * vy))


def roi_token_indices(
    scene: Scene, instruction: int, resolution: int, patch_size: int
) -> tuple[int, ...]:
    """Patch cells covering the target box, the gripper marker, and the
    one-patch-wide corridor between their centers.

    Implemented by rasterizing pixel centers at the given resolution and
    bucketing hits into patch cells, so cells agree exactly with what the
    rendered frames show.
    """
    if resolution % patch_size:
        raise ContractViolation("resolution must be divisible by patch_size")
    target = scene.object_by_color(instruction)
    scale = resolution / scene.grid_extent
    centers = (np.arange(resolution) + 0.5) / scale
    xs = centers[None, :]
    ys = centers[:, None]
    tx, ty = target.center
    gx, gy = scene.gripper_start
    hs = target.half_size
    ghs = GRIPPER_HALF_SIZE
    corridor_width = patch_size / scale  # one patch, in grid units
    hit = (np.abs(xs - tx) <= hs) & (np.abs(ys - ty) <= hs)
    hit |= (np.abs(xs - gx) <= ghs) & (np.abs(ys - gy) <= ghs)
    dist = _segment_distance(
        np.broadcast_to(xs, (resolution, resolution)),
        np.broadcast_to(ys, (resolution, resolution)),
        float(tx), float(ty), float(gx), float(gy),
    )
    hit |= dist <= corridor_width / 2.0
    grid = resolution // patch_size
    rows, cols = np.nonzero(hit)
    cells = np.unique((rows // patch_size) * grid + (cols // patch_size))
    return tuple(int(c) for c in cells)


def episode_rng_seed(global_seed: int, episode_id: int):
    """Seed material making episodes pure functions of (seed, id)."""
    return [int(global_seed), int(episode_id)]


def generate_episode(episode_id: int, world: WorldConfig) -> Episode:
    rng = np.random.default_rng(episode_rng_seed(world.seed, episode_id))
    scene = generate_scene(rng, world)
    target_idx = int(rng.integers(len(scene.objects)))
    instruction = scene.objects[target_idx].color_id
    actions = expert_action(scene, instruction, world.horizon, world.step_cap)
    return Episode(
        id=episode_id,
        scene=scene,
        instruction=instruction,
        frame_backbone=render(scene, world.backbone_resolution),
        frame_expert=render(scene, world.expert_resolution),
        actions=actions,
        roi_backbone=roi_token_indices(
            scene, instruction, world.backbone_resolution, world.backbone_cell
        ),
        roi_expert=roi_token_indices(
            scene, instruction, world.expert_resolution, world.patch_size
        ),
    )


def world_config_dict(world: WorldConfig) -> dict:
    return asdict(world)


def world_config_from_dict(d: dict) -> WorldConfig:
    return WorldConfig(**d)
