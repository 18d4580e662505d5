"""Policy assembly: the staged forward pipeline across all modes.

Modes:
  baseline     backbone only.
  vlmot        vision expert coupled into the deepest backbone layers via
               shared attention (all expert patch tokens shared).
  vlmot_agvp   same, with expert tokens pruned to the top-K by saliency
               computed from the shallow backbone layers of the same pass.
  input_fusion early-fusion comparator: final expert features pooled onto
               the backbone token grid and channel-concatenated before the
               merge MLP; no coupling.

A forward is: shallow backbone layers (recording attention when pruning
needs it), saliency + top-K selection, expert branch execution per the
feedback mode, coupled deep layers under the combined mask, action decode.
No ground-truth ROI ever enters the pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import coupling as cpl
from . import expert as ex
from . import nn
from . import pruning as pr
from . import tensor as T
from .tensor import ContractViolation, Tensor
from .world import ActionChunk

MODES = ("baseline", "vlmot", "vlmot_agvp", "input_fusion")


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "baseline"
    backbone: bb.BackboneConfig = field(default_factory=bb.BackboneConfig)
    expert: ex.ExpertConfig = field(default_factory=ex.ExpertConfig)
    coupling: cpl.CouplingConfig = field(default_factory=cpl.CouplingConfig)
    agvp_ratio: float = 0.5
    agvp_guidance: str = "action"
    agvp_layers: str = "range"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}")
        if self.agvp_guidance not in pr.GUIDANCE_MODES:
            raise ContractViolation(f"guidance must be one of {pr.GUIDANCE_MODES}")
        if self.uses_coupling and self.coupling.coupled_count > min(
            self.backbone.layer_count, self.expert.layer_count
        ):
            raise ContractViolation("coupled_count exceeds a branch depth")
        if self.mode == "vlmot_agvp" and self.agvp_guidance == "cls" and not self.expert.cls_token:
            raise ContractViolation("cls guidance requires the expert CLS token")

    @property
    def uses_expert(self) -> bool:
        return self.mode in ("vlmot", "vlmot_agvp", "input_fusion")

    @property
    def uses_coupling(self) -> bool:
        return self.mode in ("vlmot", "vlmot_agvp")

    @property
    def shallow_count(self) -> int:
        n_c = self.coupling.coupled_count if self.uses_coupling else 0
        return self.backbone.layer_count - n_c


@dataclass
class Intervention:
    """Edit applied to the hidden state entering one backbone layer."""

    layer: int  # 1-based
    kind: str  # "zero_rows" | "add"
    value: np.ndarray  # bool (B, N) rows to zero, or (B, N, d) addend


@dataclass
class ForwardResult:
    chunk: Tensor  # (B, H_a, n), components in [-1, 1]
    layout: bb.SegmentLayout
    visual_grid: tuple[int, int]
    shallow_count: int
    attention_maps: list  # per backbone layer; None where not recorded
    hidden: list | None  # Z^0..Z^L when collected
    expert_trace: ex.ExpertTrace | None
    prune_indices: np.ndarray | None  # (B, K) kept expert patch tokens
    saliency: pr.SaliencyMap | None  # resampled guidance map (expert grid)


class Model:
    """Parameters plus the mode-dependent forward pipeline."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = nn.ParamStore(dtype=self.dtype)
        self.meta: dict = {"trained": False, "steps": 0}
        self.layout = bb.layout_for(cfg.backbone)
        self._base_mask = bb.build_attention_mask(self.layout, cfg.backbone.visual_bidir)

    # -- construction -----------------------------------------------------

    def init_params(self, seed: int) -> None:
        """Draw all parameters. Backbone params come first from the stream,
        so models of different modes share backbone values for one seed."""
        rng = np.random.default_rng(seed)
        c = self.cfg
        if c.mode == "input_fusion":
            self._create_backbone_params_fused(rng)
        else:
            bb.create_backbone_params(self.params, rng, c.backbone)
        if c.uses_expert:
            ex.create_expert_params(self.params, rng, c.expert)
        if c.uses_coupling:
            cpl.create_coupling_params(
                self.params, rng, c.coupling, c.expert.hidden_dim, c.backbone.hidden_dim
            )

    def _create_backbone_params_fused(self, rng) -> None:
        # Same as the stock backbone except the merge MLP also ingests the
        # pooled expert channels.
        c = self.cfg.backbone
        bb.create_backbone_params(self.params, rng, c)
        merged = c.hidden_dim * c.merge * c.merge
        fused_in = merged + self.cfg.expert.hidden_dim
        self.params.arrays.pop("bb.merge.w1")
        w = rng.normal(0.0, 1.0 / math.sqrt(fused_in), size=(fused_in, merged))
        self.params.arrays["bb.merge.w1"] = np.ascontiguousarray(w, dtype=self.dtype)

    # -- forward ----------------------------------------------------------

    def forward(
        self,
        images_backbone: np.ndarray,
        instruction_ids: np.ndarray,
        images_expert: np.ndarray | None = None,
        tape: T.Tape | None = None,
        record_attn: bool = False,
        intervention: Intervention | None = None,
        collect_hidden: bool = False,
    ) -> ForwardResult:
        c = self.cfg
        images_backbone = np.asarray(images_backbone, dtype=self.dtype)
        if c.uses_expert:
            if images_expert is None:
                raise ContractViolation(f"mode {c.mode} requires expert-resolution frames")
            images_expert = np.asarray(images_expert, dtype=self.dtype)
        pv = self.params.view(tape)
        layout = self.layout
        heads = c.backbone.head_count
        batch = images_backbone.shape[0]
        if intervention is not None and not 1 <= intervention.layer <= c.backbone.layer_count:
            raise ContractViolation(f"intervention layer {intervention.layer} out of range")

        # embeddings ------------------------------------------------------
        extra = None
        fusion_trace = None
        if c.mode == "input_fusion":
            fusion_trace = ex.expert_forward(pv, c.expert, images_expert)
            extra = self._pooled_expert_channels(fusion_trace)
        vis = bb.patch_embed(pv, c.backbone, images_backbone, extra)
        lang = bb.embed_language(pv, np.asarray(instruction_ids))
        act = bb.action_queries(pv, c.backbone, batch, self.dtype)
        z = T.concat([vis, lang, act], axis=1)

        shallow = c.shallow_count
        need_guidance = c.mode == "vlmot_agvp" and c.agvp_guidance in (
            "action",
            "instruction",
        )
        record_shallow = record_attn or need_guidance
        attention_maps: list = []
        hidden: list | None = [] if collect_hidden else None

        def step_in(layer: int, state: Tensor) -> Tensor:
            state = self._apply_intervention(state, layer, intervention)
            if hidden is not None:
                hidden.append(state)
            return state

        for layer in range(1, shallow + 1):
            z = step_in(layer, z)
            z, attn = nn.attention_block(
                pv, f"bb.blk{layer - 1}", z, self._base_mask, heads, record_shallow
            )
            attention_maps.append(attn)

        # expert branch + coupled deep layers ------------------------------
        expert_trace = None
        prune_indices = None
        saliency = None
        if c.uses_coupling:
            partial = _PartialState(
                layout=layout,
                visual_grid=(c.backbone.token_grid, c.backbone.token_grid),
                shallow_count=shallow,
                attention_maps=attention_maps,
            )
            pairs = list(
                zip(
                    cpl.select_expert_layers(c.coupling, c.expert.layer_count),
                    range(shallow + 1, c.backbone.layer_count + 1),
                )
            )
            if c.coupling.feedback == "inject_only":
                expert_trace = ex.expert_forward(
                    pv, c.expert, images_expert,
                    record_final_attn=(c.agvp_guidance == "cls" and c.mode == "vlmot_agvp"),
                )
                prune_indices, saliency = self._selection(partial, expert_trace, images_expert)
                z = self._run_coupled_inject(
                    pv, z, expert_trace, pairs, prune_indices,
                    heads, record_attn, attention_maps, intervention, hidden,
                )
            else:
                prune_indices, saliency, z = self._run_coupled_feedback(
                    pv, z, images_expert, pairs, partial,
                    heads, record_attn, attention_maps, intervention, hidden,
                )
        else:
            expert_trace = fusion_trace

        if hidden is not None:
            hidden.append(z)

        z = T.layer_norm(z, pv("bb.final_ln.g"))
        z_action = T.slice_axis(z, 1, layout.action_span.start, layout.action_span.stop)
        chunk = bb.decode_action(pv, c.backbone, z_action)
        return ForwardResult(
            chunk=chunk,
            layout=layout,
            visual_grid=(c.backbone.token_grid, c.backbone.token_grid),
            shallow_count=shallow,
            attention_maps=attention_maps,
            hidden=hidden,
            expert_trace=expert_trace,
            prune_indices=prune_indices,
            saliency=saliency,
        )

    # -- pipeline pieces ---------------------------------------------------

    def _pooled_expert_channels(self, trace: ex.ExpertTrace) -> Tensor:
        c = self.cfg
        final = trace.states[-1]
        if trace.cls_index is not None:
            final = T.slice_axis(final, 1, 1, final.shape[1])
        ge = c.expert.grid
        gt = c.backbone.token_grid
        if ge % gt:
            raise ContractViolation("expert grid must be a multiple of the token grid")
        f = ge // gt
        b, _, de = final.shape
        x = T.reshape(final, (b, gt, f, gt, f, de))
        x = T.mean(x, axis=(2, 4))
        return T.reshape(x, (b, gt * gt, de))

    def _selection(self, partial_state, expert_trace: ex.ExpertTrace | None, images_expert=None):
        """Pick the shared expert patch tokens: (B, K) indices + saliency."""
        c = self.cfg
        m = c.expert.patch_token_count
        if c.mode != "vlmot_agvp":
            return None, None
        expert_grid = (c.expert.grid, c.expert.grid)
        if c.agvp_guidance == "cls":
            if expert_trace is None or expert_trace.final_attention is None:
                # Selection takes no gradient, so a detached standalone pass
                # supplies the CLS cue in coupled mode.
                trace = ex.expert_forward(
                    self.params.view(None), c.expert, images_expert,
                    record_final_attn=True,
                )
            else:
                trace = expert_trace
            weights = ex.cls_saliency(trace)
            sal = pr.SaliencyMap(weights=weights, grid=expert_grid, source="cls")
        else:
            layers = pr.saliency_layer_set(
                c.backbone.layer_count, c.shallow_count, c.agvp_layers
            )
            fn = (
                pr.action_to_vision_saliency
                if c.agvp_guidance == "action"
                else pr.instruction_saliency_layer
            )
            maps = [fn(partial_state, layer) for layer in layers]
            sal = pr.resample_saliency(pr.aggregate_saliency(maps), expert_grid)
        k = pr.prune_ratio_to_k(c.agvp_ratio, m)
        idx = pr.top_k_indices(sal.weights, k)
        return idx, sal

    def _run_coupled_inject(
        self, pv, z, trace, pairs, prune_indices,
        heads, record_attn, attention_maps, intervention, hidden,
    ):
        c = self.cfg
        for i, (k_e, layer) in enumerate(pairs):
            feats = trace.layer_input(k_e)
            if trace.cls_index is not None:
                feats = T.slice_axis(feats, 1, 1, feats.shape[1])
            if prune_indices is not None:
                feats = T.gather_rows(feats, prune_indices)
            z = self._coupled_step(
                pv, z, feats, k_e, i, layer, heads, record_attn,
                attention_maps, intervention, hidden, feedback="inject_only",
            )[0]
        return z

    def _run_coupled_feedback(
        self, pv, z, images_expert, pairs, partial_state,
        heads, record_attn, attention_maps, intervention, hidden,
    ):
        c = self.cfg
        x_e = ex.expert_embed(pv, c.expert, images_expert)
        first = pairs[0][0] if pairs else c.expert.layer_count + 1
        for k in range(1, first):
            x_e, _ = ex.expert_block(pv, c.expert, k, x_e)
        prev = first - 1
        prune_indices, saliency = None, None
        if pairs:
            if c.expert.cls_token:
                x_e = T.slice_axis(x_e, 1, 1, x_e.shape[1])
            prune_indices, saliency = self._selection(partial_state, None, images_expert)
            if prune_indices is not None:
                x_e = T.gather_rows(x_e, prune_indices)
        for i, (k_e, layer) in enumerate(pairs):
            for k in range(prev + 1, k_e):
                x_e, _ = ex.expert_block(pv, c.expert, k, x_e)
            z, x_e = self._coupled_step(
                pv, z, x_e, k_e, i, layer, heads, record_attn,
                attention_maps, intervention, hidden, feedback="coupled",
            )
            prev = k_e
        return prune_indices, saliency, z

    def _coupled_step(
        self, pv, z, expert_state, k_e, pair, layer, heads,
        record_attn, attention_maps, intervention, hidden, feedback,
    ):
        c = self.cfg
        z = self._apply_intervention(z, layer, intervention)
        if hidden is not None:
            hidden.append(z)
        z, new_e, attn = cpl.shared_attention_layer(
            pv, f"bb.blk{layer - 1}", k_e, pair, z, expert_state,
            self.layout, heads, c.expert, feedback,
            c.backbone.visual_bidir, record_attn,
        )
        attention_maps.append(attn)
        return z, new_e

    def _apply_intervention(self, z, layer, intervention):
        if intervention is None or intervention.layer != layer:
            return z
        if intervention.kind == "zero_rows":
            keep = (~np.asarray(intervention.value, dtype=bool)).astype(self.dtype)
            return T.mul(z, keep[:, :, None])
        if intervention.kind == "add":
            return T.add(z, np.asarray(intervention.value, dtype=self.dtype))
        raise ContractViolation(f"unknown intervention kind {intervention.kind!r}")

    # -- conveniences -------------------------------------------------------

    def predict(self, images_backbone, instruction_ids, images_expert=None) -> np.ndarray:
        return self.forward(images_backbone, instruction_ids, images_expert).chunk.data

    def infer_chunk(self, image, instruction: int, image_expert=None) -> ActionChunk:
        """Single-observation inference; consumes no ROI annotations."""
        from .world import instruction_tokens

        ids = instruction_tokens(instruction)[None, :]
        chunk = self.predict(image[None], ids, None if image_expert is None else image_expert[None])
        return ActionChunk(chunk[0])

    def mask_roi_hidden(
        self,
        images_backbone,
        instruction_ids,
        images_expert,
        layer: int,
        roi_indices,
        fraction: float,
        seed: int,
    ) -> np.ndarray:
        """Zero a seeded fraction of ROI visual-token hidden states at the
        entry of one layer and rerun; returns the perturbed chunk (B, H, n).

        ``roi_indices`` is one index list per batch element, all within the
        visual span.
        """
        if not 0.0 <= fraction <= 1.0:
            raise ContractViolation(f"fraction {fraction} outside [0, 1]")
        batch = np.asarray(images_backbone).shape[0]
        n_v = self.layout.visual_len
        zero = np.zeros((batch, self.layout.total), dtype=bool)
        for i, roi in enumerate(roi_indices):
            roi = sorted(int(r) for r in roi)
            if roi and (roi[0] < 0 or roi[-1] >= n_v):
                raise ContractViolation(f"ROI index outside visual span [0, {n_v})")
            k = int(math.ceil(fraction * len(roi) - 1e-9))
            if k:
                rng = np.random.default_rng([int(seed), i])
                chosen = rng.choice(len(roi), size=k, replace=False)
                zero[i, np.asarray(roi)[chosen]] = True
        iv = Intervention(layer=layer, kind="zero_rows", value=zero)
        return self.forward(
            images_backbone, instruction_ids, images_expert, intervention=iv
        ).chunk.data


class _PartialState:
    """Duck-typed view the saliency functions accept mid-pipeline."""

    def __init__(self, layout, visual_grid, shallow_count, attention_maps):
        self.layout = layout
        self.visual_grid = visual_grid
        self.shallow_count = shallow_count
        self.attention_maps = attention_maps


def batch_inputs(episodes) -> dict:
    """Stack episode fields into forward-ready arrays."""
    from .world import instruction_tokens

    return {
        "images_backbone": np.stack([e.frame_backbone for e in episodes]),
        "instruction_ids": np.stack([instruction_tokens(e.instruction) for e in episodes]),
        "images_expert": np.stack([e.frame_expert for e in episodes]),
        "actions": np.stack([e.actions.steps for e in episodes]),
    }
