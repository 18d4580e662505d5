"""Independent reference implementations the tests check against.

Everything here is deliberately written the slow, obvious way (explicit
loops, direct formulas) and shares no code with the package internals.
"""

from __future__ import annotations

import math

import numpy as np


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, p = b.shape
    assert k == k2
    out = np.zeros((m, p), dtype=np.float64)
    for i in range(m):
        for j in range(p):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def softmax_reference(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Direct exp/renormalize over permitted entries, row by row."""
    out = np.zeros_like(logits, dtype=np.float64)
    for i in range(logits.shape[0]):
        cols = [j for j in range(logits.shape[1]) if mask[i, j]]
        exps = [math.exp(float(logits[i, j])) for j in cols]
        total = sum(exps)
        for j, e in zip(cols, exps):
            out[i, j] = e / total
    return out


def layer_norm_reference(x: np.ndarray, scale: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Two-pass per-row mean/variance, then scale."""
    out = np.zeros_like(x, dtype=np.float64)
    for i in range(x.shape[0]):
        row = x[i].astype(np.float64)
        mu = row.sum() / row.size
        var = ((row - mu) ** 2).sum() / row.size
        out[i] = (row - mu) / math.sqrt(var + eps) * scale.astype(np.float64)
    return out


def backbone_mask_reference(n_visual: int, n_language: int, n_action: int) -> np.ndarray:
    """Rule-by-rule enumeration of the mixed prompt/action mask."""
    n = n_visual + n_language + n_action
    prompt = n_visual + n_language
    mask = np.zeros((n, n), dtype=bool)
    for q in range(n):
        for k in range(n):
            if q < prompt and k < prompt:
                mask[q, k] = k <= q  # causal within the prompt
            elif q < prompt:
                mask[q, k] = False  # prompt never sees action tokens
            else:
                mask[q, k] = True  # action sees everything
    return mask


def combined_mask_reference(
    m_expert: int, n_visual: int, n_language: int, n_action: int
) -> np.ndarray:
    n = n_visual + n_language + n_action
    base = backbone_mask_reference(n_visual, n_language, n_action)
    total = m_expert + n
    mask = np.zeros((total, total), dtype=bool)
    for q in range(total):
        for k in range(total):
            if q < m_expert:
                mask[q, k] = k < m_expert  # expert sees only expert
            elif k < m_expert:
                mask[q, k] = True  # backbone sees all expert keys
            else:
                mask[q, k] = base[q - m_expert, k - m_expert]
    return mask


def naive_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray, heads: int
) -> np.ndarray:
    """Dense multi-head attention, one head and one query row at a time."""
    t, d = q.shape
    hd = d // heads
    out = np.zeros((t, d), dtype=np.float64)
    for h in range(heads):
        qs = q[:, h * hd : (h + 1) * hd].astype(np.float64)
        ks = k[:, h * hd : (h + 1) * hd].astype(np.float64)
        vs = v[:, h * hd : (h + 1) * hd].astype(np.float64)
        for i in range(t):
            logits = []
            for j in range(t):
                logits.append(float(qs[i] @ ks[j]) / math.sqrt(hd) if mask[i, j] else None)
            permitted = [x for x in logits if x is not None]
            top = max(permitted)
            weights = [math.exp(x - top) if x is not None else 0.0 for x in logits]
            total = sum(weights)
            acc = np.zeros(hd, dtype=np.float64)
            for j in range(t):
                if weights[j]:
                    acc += (weights[j] / total) * vs[j]
            out[i, h * hd : (h + 1) * hd] = acc
    return out


def bilinear_reference(grid: np.ndarray, out_rows: int, out_cols: int) -> np.ndarray:
    """Cell-center bilinear resampling with edge clamping, scalar loops."""
    sr, sc = grid.shape

    def sample(axis_len, out_len, j):
        x = (j + 0.5) * (axis_len / out_len) - 0.5
        x0 = math.floor(x)
        t = x - x0
        i0 = min(max(x0, 0), axis_len - 1)
        i1 = min(max(x0 + 1, 0), axis_len - 1)
        return i0, i1, t

    out = np.zeros((out_rows, out_cols), dtype=np.float64)
    for r in range(out_rows):
        r0, r1, tr = sample(sr, out_rows, r)
        for c in range(out_cols):
            c0, c1, tc = sample(sc, out_cols, c)
            top = grid[r0, c0] * (1 - tc) + grid[r0, c1] * tc
            bot = grid[r1, c0] * (1 - tc) + grid[r1, c1] * tc
            out[r, c] = top * (1 - tr) + bot * tr
    return out


def controller_reference(
    target_center, target_half, gripper_start, horizon: int, cap: float
) -> np.ndarray:
    """Re-simulation of the greedy expert controller."""
    tx, ty = target_center
    px, py = float(gripper_start[0]), float(gripper_start[1])
    rows = []
    for _ in range(horizon):
        if abs(px - tx) <= target_half and abs(py - ty) <= target_half:
            rows.append((0.0, 0.0, 1.0))
            continue
        dx = max(-cap, min(cap, tx - px))
        dy = max(-cap, min(cap, ty - py))
        rows.append((dx / cap, dy / cap, -1.0))
        px += dx
        py += dy
    return np.array(rows, dtype=np.float32)


def roi_cells_reference(scene, instruction, resolution: int, patch: int) -> set[int]:
    """Per-pixel rasterization of target box, gripper box, and corridor,
    followed by patch bucketing. Pure python loops."""
    from vlmt.world import GRIPPER_HALF_SIZE

    target = scene.object_by_color(instruction)
    scale = resolution / scene.grid_extent
    tx, ty = target.center
    gx, gy = scene.gripper_start
    width = patch / scale
    cells: set[int] = set()
    grid = resolution // patch
    for row in range(resolution):
        for col in range(resolution):
            x = (col + 0.5) / scale
            y = (row + 0.5) / scale
            hit = abs(x - tx) <= target.half_size and abs(y - ty) <= target.half_size
            if not hit:
                hit = abs(x - gx) <= GRIPPER_HALF_SIZE and abs(y - gy) <= GRIPPER_HALF_SIZE
            if not hit:
                hit = _point_segment_dist(x, y, tx, ty, gx, gy) <= width / 2
            if hit:
                cells.add((row // patch) * grid + (col // patch))
    return cells


def _point_segment_dist(px, py, ax, ay, bx, by) -> float:
    vx, vy = bx - ax, by - ay
    norm2 = vx * vx + vy * vy
    if norm2 == 0:
        return math.hypot(px - ax, py - ay)
    t = max(0.0, min(1.0, ((px - ax) * vx + (py - ay) * vy) / norm2))
    return math.hypot(px - (ax + t * vx), py - (ay + t * vy))
