"""Layer-wise analysis of where action prediction draws on vision.

Two probes: (1) the masking study zeroes a fraction of ROI visual-token
hidden states at one layer and measures the change in action MSE; (2) the
contribution map scores each visual token by the positive part of
gradient-times-activation of the predicted chunk's L1 norm at a layer's
input. Outputs are versioned CSVs and plain-text graymaps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import Model, batch_inputs
from .tensor import ContractViolation
from .world import Episode

MASK_CSV_TAG = "vlmt-probe-mask/1"
ATTR_CSV_TAG = "vlmt-probe-attr/1"


def _chunk_mse(pred: np.ndarray, gt: np.ndarray) -> float:
    return float(((pred.astype(np.float64) - gt.astype(np.float64)) ** 2).mean())


def _row_seed(base_seed: int, layer: int, fraction_index: int, repeat: int) -> int:
    return (base_seed * 1_000_003 + layer * 10_007 + fraction_index * 101 + repeat) & 0x7FFFFFFF


@dataclass
class MaskingRow:
    layer: int
    fraction: float
    seed: int
    mse: float
    delta_mse: float
    episode: int | None = None  # None when aggregated over episodes


def masking_study(
    model: Model,
    episodes: list[Episode],
    layers: list[int],
    fractions: list[float],
    repeats: int,
    seed: int = 0,
    aggregate: bool = True,
    batch_size: int = 64,
) -> list[MaskingRow]:
    """Chunk-MSE under seeded ROI zeroing for each (layer, fraction, repeat).

    ``delta_mse`` is relative to the unperturbed pipeline; at fraction 0 the
    perturbed pass recomputes the identical function, so it is exactly 0.
    """
    if not episodes:
        raise ContractViolation("masking study needs at least one episode")
    batches = [episodes[s : s + batch_size] for s in range(0, len(episodes), batch_size)]
    prepared = []
    base_by_episode: dict[int, float] = {}
    for group in batches:
        inputs = batch_inputs(group)
        rois = [e.roi_backbone for e in group]
        pred = model.predict(
            inputs["images_backbone"], inputs["instruction_ids"], inputs["images_expert"]
        )
        for i, ep in enumerate(group):
            base_by_episode[ep.id] = _chunk_mse(pred[i], inputs["actions"][i])
        prepared.append((group, inputs, rois))

    rows: list[MaskingRow] = []
    for layer in layers:
        for fi, fraction in enumerate(fractions):
            for rep in range(repeats):
                row_seed = _row_seed(seed, layer, fi, rep)
                mse_by_episode: dict[int, float] = {}
                for group, inputs, rois in prepared:
                    pred = model.mask_roi_hidden(
                        inputs["images_backbone"],
                        inputs["instruction_ids"],
                        inputs["images_expert"],
                        layer=layer,
                        roi_indices=rois,
                        fraction=fraction,
                        seed=row_seed,
                    )
                    for i, ep in enumerate(group):
                        mse_by_episode[ep.id] = _chunk_mse(pred[i], inputs["actions"][i])
                if aggregate:
                    ids = sorted(mse_by_episode)
                    mse = math.fsum(mse_by_episode[i] for i in ids) / len(ids)
                    base = math.fsum(base_by_episode[i] for i in ids) / len(ids)
                    rows.append(MaskingRow(layer, fraction, row_seed, mse, mse - base))
                else:
                    for ep_id in sorted(mse_by_episode):
                        mse = mse_by_episode[ep_id]
                        rows.append(
                            MaskingRow(
                                layer, fraction, row_seed, mse,
                                mse - base_by_episode[ep_id], episode=ep_id,
                            )
                        )
    return rows


def masking_csv(rows: list[MaskingRow], trained: bool) -> str:
    header = f"# {MASK_CSV_TAG} trained={int(trained)}"
    aggregated = rows and rows[0].episode is None
    cols = "layer,r,seed,mse,delta_mse" + ("" if aggregated else ",episode")
    lines = [header, cols]
    for r in rows:
        base = f"{r.layer},{float(r.fraction)!r},{r.seed},{float(r.mse)!r},{float(r.delta_mse)!r}"
        lines.append(base if r.episode is None else f"{base},{r.episode}")
    return "\n".join(lines) + "\n"


def contribution_map(model: Model, episode: Episode, layer: int) -> np.ndarray:
    """Per-visual-token contribution scores at a layer's input, summing to 1.

    The scalar target is the L1 norm of the predicted chunk; token scores
    are the channel-summed positive part of gradient * activation.
    """
    if not 1 <= layer <= model.cfg.backbone.layer_count:
        raise ContractViolation(f"layer {layer} out of range")
    inputs = batch_inputs([episode])
    tape = T.Tape()
    out = model.forward(
        inputs["images_backbone"],
        inputs["instruction_ids"],
        inputs["images_expert"],
        tape=tape,
        collect_hidden=True,
    )
    target = T.sum_(T.absolute(out.chunk))
    tape.backward(target)
    entry = out.hidden[layer - 1]
    grad = entry.grad
    if grad is None:
        grad = np.zeros_like(entry.data)
    span = out.layout.visual_span
    product = grad[0, span, :].astype(np.float64) * entry.data[0, span, :].astype(np.float64)
    scores = np.maximum(product, 0.0).sum(axis=-1)
    total = scores.sum()
    if total > 0:
        scores = scores / total
    return scores


def roi_concentration(scores: np.ndarray, roi_indices) -> float:
    """Fraction of contribution mass on the ROI tokens, in [0, 1]."""
    idx = np.asarray(sorted(int(i) for i in roi_indices), dtype=np.int64)
    if idx.size == 0:
        return 0.0
    return float(scores[idx].sum())


def attribution_csv(rows: list[tuple[int, int, float]]) -> str:
    """Rows of (layer, episode, roi_concentration)."""
    lines = [f"# {ATTR_CSV_TAG}", "layer,episode,roi_concentration"]
    for layer, ep_id, conc in rows:
        lines.append(f"{layer},{ep_id},{float(conc)!r}")
    return "\n".join(lines) + "\n"


def graymap_pgm(weights: np.ndarray, grid: tuple[int, int], levels: int = 255) -> str:
    """Plain-text portable graymap (P2) of a token-weight grid."""
    rows, cols = grid
    if weights.size != rows * cols:
        raise ContractViolation("weights do not fill the grid")
    w = weights.astype(np.float64).reshape(rows, cols)
    top = w.max()
    scaled = np.zeros_like(w, dtype=np.int64) if top <= 0 else np.round(w / top * levels).astype(np.int64)
    lines = ["P2", f"{cols} {rows}", str(levels)]
    for r in range(rows):
        lines.append(" ".join(str(int(v)) for v in scaled[r]))
    return "\n".join(lines) + "\n"
