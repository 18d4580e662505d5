"""Binary episode container: `manifest.jsonl` plus `frames.bin`.

Line 0 of the manifest carries the format tag and a world-config echo;
each following line is one episode record with byte offsets into
frames.bin, which holds raw little-endian float32 C-order frame blobs.
Round trips are bit-identical.
"""

from __future__ import annotations

import json
import os
from typing import Iterable, Iterator

import numpy as np

from .world import (
    ActionChunk,
    Episode,
    Scene,
    SceneObject,
    WorldConfig,
    world_config_dict,
    world_config_from_dict,
)

FORMAT_TAG = "vlmt-ds/1"
MANIFEST_NAME = "manifest.jsonl"
FRAMES_NAME = "frames.bin"


class FormatError(ValueError):
    """Malformed container; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int, file: str = MANIFEST_NAME):
        super().__init__(f"{file} @ byte {offset}: {message}")
        self.offset = offset
        self.file = file


def _scene_to_json(scene: Scene) -> dict:
    return {
        "grid_extent": scene.grid_extent,
        "objects": [
            {
                "color_id": o.color_id,
                "center": [o.center[0], o.center[1]],
                "half_size": o.half_size,
            }
            for o in scene.objects
        ],
        "gripper_start": [scene.gripper_start[0], scene.gripper_start[1]],
    }


def _scene_from_json(d: dict) -> Scene:
    return Scene(
        grid_extent=int(d["grid_extent"]),
        objects=tuple(
            SceneObject(
                color_id=int(o["color_id"]),
                center=(int(o["center"][0]), int(o["center"][1])),
                half_size=int(o["half_size"]),
            )
            for o in d["objects"]
        ),
        gripper_start=(int(d["gripper_start"][0]), int(d["gripper_start"][1])),
    )


def _frame_bytes(frame: np.ndarray) -> bytes:
    return np.ascontiguousarray(frame, dtype="<f4").tobytes()


def write_dataset(episodes: Iterable[Episode], path: str, world: WorldConfig) -> int:
    """Write episodes under ``path``; returns the number written."""
    os.makedirs(path, exist_ok=True)
    manifest_path = os.path.join(path, MANIFEST_NAME)
    frames_path = os.path.join(path, FRAMES_NAME)
    count = 0
    with open(manifest_path, "w", encoding="utf-8") as mf, open(frames_path, "wb") as bf:
        header = {"format": FORMAT_TAG, "world_config": world_config_dict(world)}
        mf.write(json.dumps(header, separators=(",", ":")) + "\n")
        offset = 0
        for ep in episodes:
            blobs = {}
            for key, frame in (("backbone", ep.frame_backbone), ("expert", ep.frame_expert)):
                raw = _frame_bytes(frame)
                bf.write(raw)
                blobs[key] = {
                    "offset": offset,
                    "length": len(raw),
                    "shape": list(frame.shape),
                }
                offset += len(raw)
            record = {
                "id": ep.id,
                "scene": _scene_to_json(ep.scene),
                "instruction": ep.instruction,
                "actions": [[float(v) for v in row] for row in ep.actions.steps],
                "roi_backbone": list(ep.roi_backbone),
                "roi_expert": list(ep.roi_expert),
                "frames": blobs,
            }
            mf.write(json.dumps(record, separators=(",", ":")) + "\n")
            count += 1
    return count


def _read_frame(raw: bytes, meta: dict, frames_size: int) -> np.ndarray:
    offset, length = int(meta["offset"]), int(meta["length"])
    shape = tuple(int(s) for s in meta["shape"])
    expected = int(np.prod(shape)) * 4
    if length != expected:
        raise FormatError(
            f"blob length {length} does not match shape {shape}", offset, FRAMES_NAME
        )
    if offset + length > frames_size:
        raise FormatError(
            f"blob [{offset}:{offset + length}] past end of file ({frames_size})",
            offset,
            FRAMES_NAME,
        )
    return np.frombuffer(raw[offset : offset + length], dtype="<f4").reshape(shape).copy()


def read_header(path: str) -> WorldConfig:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    with open(manifest_path, "r", encoding="utf-8") as mf:
        line = mf.readline()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"unparseable header: {exc.msg}", 0) from None
    if header.get("format") != FORMAT_TAG:
        raise FormatError(f"expected format tag {FORMAT_TAG!r}", 0)
    return world_config_from_dict(header["world_config"])


def read_dataset(path: str) -> tuple[WorldConfig, list[Episode]]:
    """Load every episode; inverse of write_dataset, bit-exact."""
    manifest_path = os.path.join(path, MANIFEST_NAME)
    frames_path = os.path.join(path, FRAMES_NAME)
    with open(frames_path, "rb") as bf:
        raw = bf.read()
    episodes: list[Episode] = []
    world: WorldConfig | None = None
    offset = 0
    with open(manifest_path, "r", encoding="utf-8") as mf:
        for lineno, line in enumerate(mf):
            line_offset = offset
            offset += len(line.encode("utf-8"))
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"unparseable line: {exc.msg}", line_offset) from None
            if lineno == 0:
                if record.get("format") != FORMAT_TAG:
                    raise FormatError(f"expected format tag {FORMAT_TAG!r}", 0)
                world = world_config_from_dict(record["world_config"])
                continue
            try:
                frames = record["frames"]
                episodes.append(
                    Episode(
                        id=int(record["id"]),
                        scene=_scene_from_json(record["scene"]),
                        instruction=int(record["instruction"]),
                        frame_backbone=_read_frame(raw, frames["backbone"], len(raw)),
                        frame_expert=_read_frame(raw, frames["expert"], len(raw)),
                        actions=ActionChunk(
                            np.array(record["actions"], dtype=np.float32)
                        ),
                        roi_backbone=tuple(int(i) for i in record["roi_backbone"]),
                        roi_expert=tuple(int(i) for i in record["roi_expert"]),
                    )
                )
            except KeyError as exc:
                raise FormatError(f"missing field {exc}", line_offset) from None
    if world is None:
        raise FormatError("empty manifest (no header line)", 0)
    return world, episodes


def generate_dataset(path: str, world: WorldConfig, num_episodes: int) -> int:
    """Generate episodes 0..n-1 for the config and write them to ``path``."""
    from .world import generate_episode

    def episodes() -> Iterator[Episode]:
        for i in range(num_episodes):
            yield generate_episode(i, world)

    return write_dataset(episodes(), path, world)
