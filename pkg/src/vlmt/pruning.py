"""Action-guided token pruning: turn shallow-layer attention into a
saliency map over visual tokens, resample it onto the expert grid, and
keep the top-K expert tokens.

Saliency comes from recorded attention of the pre-coupled backbone layers:
the action-to-vision block is averaged over heads, then over action rows,
then over a set of shallow layers. Selection is deterministic with ties
broken toward lower indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ContractViolation

GUIDANCE_MODES = ("action", "instruction", "cls")


@dataclass(frozen=True)
class SaliencyMap:
    """Nonnegative per-token weights on a (rows, cols) grid.

    ``weights`` may carry a leading batch axis; the last axis always has
    rows*cols entries in raster order.
    """

    weights: np.ndarray
    grid: tuple[int, int]
    source: str

    def __post_init__(self):
        w = np.asarray(self.weights)
        object.__setattr__(self, "weights", w)
        if w.shape[-1] != self.grid[0] * self.grid[1]:
            raise ContractViolation(
                f"{w.shape[-1]} weights do not fill grid {self.grid}"
            )
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ContractViolation("saliency weights must be finite and nonnegative")


@dataclass(frozen=True)
class PruneSet:
    """Strictly increasing token indices of the kept set."""

    indices: tuple[int, ...]
    k: int

    def __post_init__(self):
        if len(self.indices) != self.k:
            raise ContractViolation("|indices| must equal k")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ContractViolation("indices must be strictly increasing")


def _require_shallow(state, layer: int) -> np.ndarray:
    if not 1 <= layer <= state.shallow_count:
        raise ContractViolation(
            f"layer {layer} not in the pre-coupled region [1, {state.shallow_count}]"
        )
    attn = state.attention_maps[layer - 1]
    if attn is None:
        raise ContractViolation(f"no attention recorded at layer {layer}")
    return attn


def _span_to_vision_saliency(state, layer: int, span: slice, source: str) -> SaliencyMap:
    attn = _require_shallow(state, layer)  # (B, heads, N, N)
    layout = state.layout
    rows = attn[:, :, span, layout.visual_span]
    if rows.shape[2] == 0:
        raise ContractViolation(f"empty {source} span")
    weights = rows.mean(axis=1).mean(axis=1)  # heads, then query rows
    return SaliencyMap(weights=weights, grid=state.visual_grid, source=source)


def action_to_vision_saliency(state, layer: int) -> SaliencyMap:
    """Head-averaged action-to-vision attention at one shallow layer."""
    return _span_to_vision_saliency(state, layer, state.layout.action_span, "action_attn")


def instruction_saliency_layer(state, layer: int) -> SaliencyMap:
    """Same pipeline with language rows replacing action rows."""
    return _span_to_vision_saliency(
        state, layer, state.layout.language_span, "instruction_attn"
    )


def aggregate_saliency(maps: list[SaliencyMap]) -> SaliencyMap:
    if not maps:
        raise ContractViolation("cannot aggregate an empty layer set")
    grid = maps[0].grid
    if any(m.grid != grid for m in maps):
        raise ContractViolation("saliency maps disagree on grid dims")
    weights = np.mean([m.weights for m in maps], axis=0)
    return SaliencyMap(weights=weights, grid=grid, source=maps[0].source)


def saliency_layer_set(layer_count: int, shallow_count: int, spec: str) -> list[int]:
    """Parse the reference-layer config: ``range`` or ``single:<layer>``.

    ``range`` means every pre-coupled layer from 2 onward; if that window
    is empty (very shallow stacks) it falls back to all pre-coupled layers.
    """
    if spec == "range":
        layers = list(range(2, shallow_count + 1))
        return layers if layers else list(range(1, shallow_count + 1))
    if spec.startswith("single:"):
        layer = int(spec.split(":", 1)[1])
        if not 1 <= layer <= shallow_count:
            raise ContractViolation(
                f"reference layer {layer} outside the shallow region [1, {shallow_count}]"
            )
        return [layer]
    raise ContractViolation(f"bad saliency layer spec {spec!r}")


def _lin_weights(src: int, dst: int):
    x = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    x0 = np.floor(x).astype(np.int64)
    t = x - x0
    i0 = np.clip(x0, 0, src - 1)
    i1 = np.clip(x0 + 1, 0, src - 1)
    return i0, i1, t


def resample_grid(values: np.ndarray, src_grid, dst_grid) -> np.ndarray:
    """Bilinear cell-center resampling (align-corners-false, edge clamp).

    ``values`` is (..., src_rows*src_cols) raster order; result likewise.
    """
    sr, sc = src_grid
    dr, dc = dst_grid
    if values.shape[-1] != sr * sc:
        raise ContractViolation("token count does not match source grid")
    grid = values.reshape(values.shape[:-1] + (sr, sc))
    r0, r1, tr = _lin_weights(sr, dr)
    c0, c1, tc = _lin_weights(sc, dc)
    rows = np.take(grid, r0, axis=-2) * (1 - tr)[:, None] + np.take(
        grid, r1, axis=-2
    ) * tr[:, None]
    out = np.take(rows, c0, axis=-1) * (1 - tc) + np.take(rows, c1, axis=-1) * tc
    return out.reshape(values.shape[:-1] + (dr * dc,))


def resample_saliency(sal: SaliencyMap, dst_grid: tuple[int, int]) -> SaliencyMap:
    weights = resample_grid(sal.weights, sal.grid, dst_grid)
    # Clamp tiny negative round-off so the type invariant stays intact.
    weights = np.maximum(weights, 0.0)
    return SaliencyMap(weights=weights, grid=dst_grid, source=sal.source)


def top_k_indices(weights: np.ndarray, k: int) -> np.ndarray:
    """Batched top-k over the last axis; ties go to the lower index.

    Returns integer indices of shape batch + (k,), sorted ascending.
    """
    n = weights.shape[-1]
    if not 0 <= k <= n:
        raise ContractViolation(f"K={k} outside [0, {n}]")
    order = np.argsort(-weights, axis=-1, kind="stable")
    return np.sort(order[..., :k], axis=-1)


def top_k(sal: SaliencyMap, k: int) -> PruneSet:
    if sal.weights.ndim != 1:
        raise ContractViolation("top_k wants a single (unbatched) map")
    idx = top_k_indices(sal.weights, k)
    return PruneSet(indices=tuple(int(i) for i in idx), k=k)


def prune_ratio_to_k(ratio: float, token_count: int) -> int:
    """Ratio is the fraction removed; K = ceil((1-ratio) * tokens)."""
    if not 0.0 <= ratio <= 1.0:
        raise ContractViolation(f"pruning ratio {ratio} outside [0, 1]")
    return int(math.ceil((1.0 - ratio) * token_count - 1e-9))


def saliency_to_csv(sal: SaliencyMap) -> str:
    """Token weights as ``row,col,weight`` lines (single map)."""
    if sal.weights.ndim != 1:
        raise ContractViolation("csv export wants a single map")
    rows, cols = sal.grid
    lines = [f"# vlmt-saliency/1 source={sal.source} grid={rows}x{cols}"]
    lines.append("row,col,weight")
    for i, w in enumerate(sal.weights):
        lines.append(f"{i // cols},{i % cols},{float(w)!r}")
    return "\n".join(lines) + "\n"
