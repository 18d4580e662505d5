"""Checkpoint container: magic line, JSON parameter table, float32 payload.

The table lists (name, shape, offset) with offsets into the little-endian
float32 payload that follows; parameters are laid out in sorted-name order
so identical models always serialize to identical bytes.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"vlmt-ck/1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    names = sorted(arrays)
    table = []
    offset = 0
    payloads = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        raw = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"params": table, "meta": meta}, separators=(",", ":"), sort_keys=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(header.encode("utf-8"))
        f.write(b"\n")
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        header_line = f.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: unparseable header: {exc.msg}") from None
        payload = f.read()
    arrays: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        end = start + count * 4
        if end > len(payload):
            raise CheckpointError(
                f"{path}: parameter {entry['name']!r} spans [{start}:{end}] "
                f"past payload end {len(payload)}"
            )
        arrays[entry["name"]] = (
            np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
        )
    return header["meta"], arrays
