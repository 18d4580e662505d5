"""ViT-style vision expert with fully bidirectional attention.

Runs at a higher resolution than the backbone and keeps the state entering
every layer, so each coupled layer's native QKV projections can be
re-applied to exactly the features that layer consumes. The optional CLS
token is only used by the CLS-guidance ablation and is never shared into
the backbone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ContractViolation, Tensor


@dataclass(frozen=True)
class ExpertConfig:
    hidden_dim: int = 48
    layer_count: int = 8
    head_count: int = 4
    mlp_ratio: int = 4
    resolution: int = 128
    patch_size: int = 8
    cls_token: bool = True
    posenc_scale: float = 0.25

    def __post_init__(self):
        if self.hidden_dim % self.head_count:
            raise ContractViolation("expert hidden_dim must be divisible by heads")
        if self.resolution % self.patch_size:
            raise ContractViolation("expert resolution must be divisible by patch")

    @property
    def grid(self) -> int:
        return self.resolution // self.patch_size

    @property
    def patch_token_count(self) -> int:
        return self.grid * self.grid

    @property
    def token_count(self) -> int:
        return self.patch_token_count + (1 if self.cls_token else 0)


@dataclass
class ExpertTrace:
    """Per-layer features from a standalone expert pass.

    ``states[k]`` is the state entering layer k+1 (states[0] is the
    embedding output); ``states[layer_count]`` is the final output.
    """

    states: list[Tensor]
    grid: tuple[int, int]
    cls_index: int | None  # row 0 when present
    final_attention: np.ndarray | None = None  # (B, heads, M, M), last layer

    def layer_input(self, k: int) -> Tensor:
        """State consumed by 1-based layer k."""
        return self.states[k - 1]

    def layer_output(self, k: int) -> Tensor:
        return self.states[k]


def create_expert_params(
    store: nn.ParamStore, rng: np.random.Generator, cfg: ExpertConfig
) -> None:
    d = cfg.hidden_dim
    patch_in = cfg.patch_size * cfg.patch_size * 3
    store.create(rng, "expert.patch.w", (patch_in, d), "lecun")
    store.create(rng, "expert.patch.b", (d,), "zeros")
    if cfg.cls_token:
        store.create(rng, "expert.cls", (1, d), "embed")
    for k in range(cfg.layer_count):
        nn.create_block_params(store, rng, f"expert.blk{k}", d, cfg.mlp_ratio)


def expert_positions(cfg: ExpertConfig) -> np.ndarray:
    return cfg.posenc_scale * nn.sincos_grid(cfg.grid, cfg.grid, cfg.hidden_dim)


def expert_embed(pv: nn.ParamView, cfg: ExpertConfig, images: np.ndarray) -> Tensor:
    if images.shape[1] != cfg.resolution:
        raise ContractViolation(
            f"expert expects {cfg.resolution}x{cfg.resolution}, got {images.shape[1:3]}"
        )
    patches = nn.patchify(images, cfg.patch_size)
    tok = nn.linear(Tensor(patches), pv("expert.patch.w"), pv("expert.patch.b"))
    tok = T.add(tok, expert_positions(cfg).astype(images.dtype))
    if cfg.cls_token:
        b = images.shape[0]
        cls = T.reshape(pv("expert.cls"), (1, 1, cfg.hidden_dim))
        cls = T.add(cls, np.zeros((b, 1, cfg.hidden_dim), dtype=images.dtype))
        tok = T.concat([cls, tok], axis=1)
    return tok


def expert_block(
    pv: nn.ParamView, cfg: ExpertConfig, k: int, x: Tensor, record: bool = False
):
    """Run 1-based expert layer k (no mask: fully bidirectional)."""
    mask = np.ones((x.shape[1], x.shape[1]), dtype=bool)
    return nn.attention_block(pv, f"expert.blk{k - 1}", x, mask, cfg.head_count, record)


def expert_forward(
    pv: nn.ParamView, cfg: ExpertConfig, images: np.ndarray, record_final_attn: bool = False
) -> ExpertTrace:
    """Standalone pass keeping every layer's input/output features."""
    x = expert_embed(pv, cfg, images)
    states = [x]
    final_attn = None
    for k in range(1, cfg.layer_count + 1):
        record = record_final_attn and k == cfg.layer_count
        x, attn = expert_block(pv, cfg, k, x, record)
        states.append(x)
        if record:
            final_attn = attn
    return ExpertTrace(
        states=states,
        grid=(cfg.grid, cfg.grid),
        cls_index=0 if cfg.cls_token else None,
        final_attention=final_attn,
    )


def expert_qkv(pv: nn.ParamView, cfg: ExpertConfig, k: int, features: Tensor):
    """Project features with 1-based layer k's native attention weights."""
    if not 1 <= k <= cfg.layer_count:
        raise ContractViolation(f"expert layer {k} outside [1, {cfg.layer_count}]")
    p = f"expert.blk{k - 1}.attn"
    return (
        T.matmul(features, pv(p + ".wq")),
        T.matmul(features, pv(p + ".wk")),
        T.matmul(features, pv(p + ".wv")),
    )


def cls_saliency(trace: ExpertTrace) -> np.ndarray:
    """Final-layer CLS-to-patch attention, head-averaged and renormalized.

    Returns (B, M) weights over patch tokens summing to 1 per row.
    """
    if trace.cls_index is None:
        raise ContractViolation("cls_saliency requires the CLS token enabled")
    if trace.final_attention is None:
        raise ContractViolation("expert trace has no recorded final attention")
    rows = trace.final_attention[:, :, trace.cls_index, :]  # (B, heads, M+1)
    rows = rows.mean(axis=1)
    patches = np.delete(rows, trace.cls_index, axis=1)
    total = patches.sum(axis=1, keepdims=True)
    return patches / total
