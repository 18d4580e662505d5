"""Multi-segment policy backbone: patch-merge visual encoder, language and
zero-initialized action tokens, mixed attention mask, MLP action decoder.

The sequence is laid out [visual | language | action]. Prompt tokens
(visual + language) attend causally within the prompt and never see action
tokens; action tokens attend everywhere, bidirectionally among themselves,
which is what makes parallel chunk decoding work.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ContractViolation, Tensor
from .world import INSTRUCTION_LENGTH, VOCAB_SIZE


@dataclass(frozen=True)
class BackboneConfig:
    hidden_dim: int = 64
    layer_count: int = 8
    head_count: int = 4
    mlp_ratio: int = 4
    resolution: int = 64
    patch_size: int = 8
    merge: int = 2
    language_length: int = INSTRUCTION_LENGTH
    vocab_size: int = VOCAB_SIZE
    action_token_count: int = 8  # equals the chunk horizon
    action_dim: int = 3
    visual_bidir: bool = False  # open alternative: visual tokens see each other
    # Sin/cos tables have unit-scale channels while patch content is much
    # smaller; this factor keeps position from drowning content in the keys.
    posenc_scale: float = 0.25

    def __post_init__(self):
        if self.hidden_dim % self.head_count:
            raise ContractViolation("hidden_dim must be divisible by head_count")
        if self.resolution % (self.patch_size * self.merge):
            raise ContractViolation("resolution must be divisible by patch*merge")

    @property
    def patch_grid(self) -> int:
        return self.resolution // self.patch_size

    @property
    def token_grid(self) -> int:
        return self.patch_grid // self.merge

    @property
    def visual_token_count(self) -> int:
        return self.token_grid * self.token_grid


@dataclass(frozen=True)
class SegmentLayout:
    """Contiguous [visual | language | action] spans over the sequence."""

    visual_len: int
    language_len: int
    action_len: int

    def __post_init__(self):
        if min(self.visual_len, self.language_len, self.action_len) < 0:
            raise ContractViolation("segment lengths must be nonnegative")
        if self.total == 0:
            raise ContractViolation("layout must contain at least one token")

    @property
    def visual_span(self) -> slice:
        return slice(0, self.visual_len)

    @property
    def language_span(self) -> slice:
        return slice(self.visual_len, self.visual_len + self.language_len)

    @property
    def action_span(self) -> slice:
        start = self.visual_len + self.language_len
        return slice(start, start + self.action_len)

    @property
    def prompt_len(self) -> int:
        return self.visual_len + self.language_len

    @property
    def total(self) -> int:
        return self.visual_len + self.language_len + self.action_len


def layout_for(cfg: BackboneConfig) -> SegmentLayout:
    return SegmentLayout(cfg.visual_token_count, cfg.language_length, cfg.action_token_count)


def build_attention_mask(layout: SegmentLayout, visual_bidir: bool = False) -> np.ndarray:
    """Boolean (N, N) query-by-key permission matrix.

    Rules: prompt tokens attend causally within the prompt and never to
    action tokens; action tokens attend to the whole prompt and
    bidirectionally to all action tokens. ``visual_bidir`` additionally
    opens the visual-visual block both ways.
    """
    n = layout.total
    p = layout.prompt_len
    mask = np.zeros((n, n), dtype=bool)
    mask[:p, :p] = np.tril(np.ones((p, p), dtype=bool))
    if visual_bidir:
        v = layout.visual_len
        mask[:v, :v] = True
    mask[p:, :] = True
    return mask


def create_backbone_params(
    store: nn.ParamStore, rng: np.random.Generator, cfg: BackboneConfig
) -> None:
    d = cfg.hidden_dim
    patch_in = cfg.patch_size * cfg.patch_size * 3
    merged = d * cfg.merge * cfg.merge
    store.create(rng, "bb.patch.w", (patch_in, d), "lecun")
    store.create(rng, "bb.patch.b", (d,), "zeros")
    store.create(rng, "bb.merge.w1", (merged, merged), "lecun")
    store.create(rng, "bb.merge.b1", (merged,), "zeros")
    store.create(rng, "bb.merge.w2", (merged, d), "lecun")
    store.create(rng, "bb.merge.b2", (d,), "zeros")
    store.create(rng, "bb.lang.embed", (cfg.vocab_size, d), "embed")
    store.create(rng, "bb.lang.pos", (cfg.language_length, d), "embed")
    store.create(rng, "bb.action.pos", (cfg.action_token_count, d), "embed")
    for i in range(cfg.layer_count):
        nn.create_block_params(store, rng, f"bb.blk{i}", d, cfg.mlp_ratio)
    store.create(rng, "bb.final_ln.g", (d,), "ones")
    store.create(rng, "bb.head.w1", (d, d), "lecun")
    store.create(rng, "bb.head.b1", (d,), "zeros")
    store.create(rng, "bb.head.w2", (d, cfg.action_dim), "lecun")
    store.create(rng, "bb.head.b2", (cfg.action_dim,), "zeros")


def patch_positions(cfg: BackboneConfig) -> np.ndarray:
    return cfg.posenc_scale * nn.sincos_grid(cfg.patch_grid, cfg.patch_grid, cfg.hidden_dim)


def merge_groups(tokens: Tensor, grid: int, merge: int) -> Tensor:
    """Concatenate each merge x merge token neighborhood channel-wise.

    (B, grid*grid, d) -> (B, (grid/merge)^2, d*merge*merge), raster order.
    """
    b, _, d = tokens.shape
    sub = grid // merge
    x = T.reshape(tokens, (b, sub, merge, sub, merge, d))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, sub * sub, d * merge * merge))


def patch_embed(
    pv: nn.ParamView, cfg: BackboneConfig, images: np.ndarray, extra_channels: Tensor | None = None
) -> Tensor:
    """Images to merged visual tokens: per-patch linear embedding, fixed 2-D
    sin/cos positions, 2x2 neighborhood concat, then a two-layer MLP to the
    hidden dim. ``extra_channels`` (B, N_v, c) is appended to the merged
    vector before the MLP (used by the early-fusion ablation)."""
    if images.shape[1] != cfg.resolution:
        raise ContractViolation(
            f"expected {cfg.resolution}x{cfg.resolution} input, got {images.shape[1:3]}"
        )
    patches = nn.patchify(images, cfg.patch_size)
    tok = nn.linear(Tensor(patches), pv("bb.patch.w"), pv("bb.patch.b"))
    tok = T.add(tok, patch_positions(cfg).astype(images.dtype))
    merged = merge_groups(tok, cfg.patch_grid, cfg.merge)
    if extra_channels is not None:
        merged = T.concat([merged, extra_channels], axis=2)
    h = T.gelu(nn.linear(merged, pv("bb.merge.w1"), pv("bb.merge.b1")))
    return nn.linear(h, pv("bb.merge.w2"), pv("bb.merge.b2"))


def embed_language(pv: nn.ParamView, instr_ids: np.ndarray) -> Tensor:
    tok = T.take_rows(pv("bb.lang.embed"), instr_ids)
    return T.add(tok, pv("bb.lang.pos"))


def action_queries(pv: nn.ParamView, cfg: BackboneConfig, batch: int, dtype) -> Tensor:
    """Zero-initialized action tokens plus learned per-slot positions."""
    zeros = np.zeros((batch, cfg.action_token_count, cfg.hidden_dim), dtype=dtype)
    return T.add(Tensor(zeros), pv("bb.action.pos"))


def decode_action(pv: nn.ParamView, cfg: BackboneConfig, z_action: Tensor) -> Tensor:
    """Final action hidden states -> chunk in [-1, 1], (B, H_a, n)."""
    h = T.gelu(nn.linear(z_action, pv("bb.head.w1"), pv("bb.head.b1")))
    out = nn.linear(h, pv("bb.head.w2"), pv("bb.head.b2"))
    return T.tanh(out)
