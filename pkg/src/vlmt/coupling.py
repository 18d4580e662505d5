"""Shared-attention coupling between the vision expert and the backbone.

For each coupled (expert layer, backbone layer) pair, the expert's native
QKV projections are aligned to the backbone width with per-pair linear
maps, concatenated ahead of the backbone QKV, and attended jointly under a
combined mask: expert tokens stay bidirectional among themselves and never
read backbone tokens, while every backbone token may read expert tokens.
The output splits back per branch. In coupled mode the expert half is
projected back to the expert width and continues its own stack; in
inject-only mode it is discarded and the expert branch stays untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .backbone import SegmentLayout, build_attention_mask
from .tensor import ContractViolation, Tensor

SELECTIONS = ("last", "first", "uniform")
FEEDBACK_MODES = ("coupled", "inject_only")


@dataclass(frozen=True)
class CouplingConfig:
    coupled_count: int = 4  # deepest backbone layers participating
    selection: str = "last"  # which expert layers feed them
    feedback: str = "coupled"

    def __post_init__(self):
        if self.selection not in SELECTIONS:
            raise ContractViolation(f"selection must be one of {SELECTIONS}")
        if self.feedback not in FEEDBACK_MODES:
            raise ContractViolation(f"feedback must be one of {FEEDBACK_MODES}")
        if self.coupled_count < 0:
            raise ContractViolation("coupled_count must be nonnegative")


def select_expert_layers(cfg: CouplingConfig, expert_layer_count: int) -> list[int]:
    """1-based expert layer indices, increasing, one per coupled pair."""
    n = cfg.coupled_count
    if n > expert_layer_count:
        raise ContractViolation(
            f"coupled_count {n} exceeds expert depth {expert_layer_count}"
        )
    if n == 0:
        return []
    if cfg.selection == "last":
        return list(range(expert_layer_count - n + 1, expert_layer_count + 1))
    if cfg.selection == "first":
        return list(range(1, n + 1))
    if n == 1:
        return [expert_layer_count]
    step = (expert_layer_count - 1) / (n - 1)
    return [round(1 + i * step) for i in range(n)]


def create_coupling_params(
    store: nn.ParamStore,
    rng: np.random.Generator,
    cfg: CouplingConfig,
    expert_dim: int,
    backbone_dim: int,
) -> None:
    for i in range(cfg.coupled_count):
        for name in ("q", "k", "v"):
            store.create(rng, f"coupling.p{i}.align.{name}", (expert_dim, backbone_dim), "lecun")
        if cfg.feedback == "coupled":
            store.create(rng, f"coupling.p{i}.back", (backbone_dim, expert_dim), "lecun")


def align_qkv(pv: nn.ParamView, pair: int, q_e: Tensor, k_e: Tensor, v_e: Tensor):
    """Project an expert QKV triplet into the backbone dim (per-pair maps)."""
    p = f"coupling.p{pair}.align"
    return (
        T.matmul(q_e, pv(p + ".q")),
        T.matmul(k_e, pv(p + ".k")),
        T.matmul(v_e, pv(p + ".v")),
    )


def combined_mask(
    expert_count: int, layout: SegmentLayout, visual_bidir: bool = False
) -> np.ndarray:
    """(M'+N, M'+N) permission matrix, expert block first.

    Expert queries see only expert keys (fully bidirectional); every
    backbone query sees all expert keys; the backbone-backbone block is the
    baseline mask.
    """
    if expert_count < 0:
        raise ContractViolation("expert_count must be nonnegative")
    base = build_attention_mask(layout, visual_bidir)
    n = layout.total
    m = expert_count
    mask = np.zeros((m + n, m + n), dtype=bool)
    mask[:m, :m] = True
    mask[m:, :m] = True
    mask[m:, m:] = base
    return mask


def shared_attention_layer(
    pv: nn.ParamView,
    backbone_prefix: str,
    expert_layer: int,
    pair: int,
    z: Tensor,
    expert_state: Tensor | None,
    layout: SegmentLayout,
    heads: int,
    expert_cfg,
    feedback: str,
    visual_bidir: bool = False,
    record: bool = False,
):
    """One coupled step: backbone layer + expert layer under shared attention.

    ``expert_state`` is the (already pruned) expert branch state entering
    its layer; None or zero tokens degrade exactly to the plain backbone
    block. Returns (new backbone state, new expert state, attention).
    """
    from .expert import expert_qkv  # local import to avoid a cycle

    h = T.layer_norm(z, pv(backbone_prefix + ".ln1.g"))
    q_z = T.matmul(h, pv(backbone_prefix + ".attn.wq"))
    k_z = T.matmul(h, pv(backbone_prefix + ".attn.wk"))
    v_z = T.matmul(h, pv(backbone_prefix + ".attn.wv"))

    m = 0 if expert_state is None else expert_state.shape[1]
    if m > 0:
        e_norm = T.layer_norm(
            expert_state, pv(f"expert.blk{expert_layer - 1}.ln1.g")
        )
        q_e, k_e, v_e = expert_qkv(pv, expert_cfg, expert_layer, e_norm)
        q_e, k_e, v_e = align_qkv(pv, pair, q_e, k_e, v_e)
        q = T.concat([q_e, q_z], axis=1)
        k = T.concat([k_e, k_z], axis=1)
        v = T.concat([v_e, v_z], axis=1)
    else:
        q, k, v = q_z, k_z, v_z

    mask = combined_mask(m, layout, visual_bidir)
    ctx, attn = nn.multi_head_attention(q, k, v, mask, heads, record)

    ctx_z = T.slice_axis(ctx, 1, m, m + layout.total) if m > 0 else ctx
    z = T.add(z, T.matmul(ctx_z, pv(backbone_prefix + ".attn.wo")))
    h2 = T.layer_norm(z, pv(backbone_prefix + ".ln2.g"))
    z = T.add(z, nn.mlp(h2, pv, backbone_prefix + ".mlp"))

    new_expert = expert_state
    if m > 0 and feedback == "coupled":
        ctx_e = T.slice_axis(ctx, 1, 0, m)
        ctx_e = T.matmul(ctx_e, pv(f"coupling.p{pair}.back"))
        ep = f"expert.blk{expert_layer - 1}"
        e = T.add(expert_state, T.matmul(ctx_e, pv(ep + ".attn.wo")))
        e2 = T.layer_norm(e, pv(ep + ".ln2.g"))
        new_expert = T.add(e, nn.mlp(e2, pv, ep + ".mlp"))

    return z, new_expert, attn
