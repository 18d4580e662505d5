import numpy as np
import pytest

from vlmt import pruning as pr
from vlmt.coupling import CouplingConfig
from vlmt.model import Model, batch_inputs
from vlmt.tensor import ContractViolation

from conftest import make_tiny_model


class TestModes:
    @pytest.mark.parametrize("mode", ("baseline", "vlmot", "vlmot_agvp", "input_fusion"))
    def test_forward_shapes(self, mode, tiny_episodes):
        model = make_tiny_model(mode, seed=50)
        inputs = batch_inputs(tiny_episodes[:3])
        out = model.forward(
            inputs["images_backbone"], inputs["instruction_ids"], inputs["images_expert"]
        )
        cfg = model.cfg.backbone
        assert out.chunk.shape == (3, cfg.action_token_count, cfg.action_dim)

    def test_expert_modes_require_expert_frames(self, tiny_episodes):
        model = make_tiny_model("vlmot", seed=51)
        inputs = batch_inputs(tiny_episodes[:1])
        with pytest.raises(ContractViolation):
            model.forward(inputs["images_backbone"], inputs["instruction_ids"], None)

    def test_param_prefixes_by_mode(self):
        assert all(
            k.startswith("bb.") for k in make_tiny_model("baseline").params.arrays
        )
        vl = make_tiny_model("vlmot_agvp").params.arrays
        assert any(k.startswith("expert.") for k in vl)
        assert any(k.startswith("coupling.") for k in vl)
        fused = make_tiny_model("input_fusion").params.arrays
        assert any(k.startswith("expert.") for k in fused)
        assert not any(k.startswith("coupling.") for k in fused)


class TestAgvpPipeline:
    def test_prune_count_follows_ratio(self, tiny_episodes):
        for ratio in (0.0, 0.25, 0.5, 1.0):
            model = make_tiny_model("vlmot_agvp", seed=52, agvp_ratio=ratio)
            inputs = batch_inputs(tiny_episodes[:2])
            out = model.forward(
                inputs["images_backbone"], inputs["instruction_ids"], inputs["images_expert"]
            )
            want = pr.prune_ratio_to_k(ratio, model.cfg.expert.patch_token_count)
            assert out.prune_indices.shape == (2, want)
            assert np.all(np.diff(out.prune_indices, axis=1) > 0)

    def test_saliency_shape_and_source(self, tiny_episodes):
        for guidance, source in (
            ("action", "action_attn"),
            ("instruction", "instruction_attn"),
            ("cls", "cls"),
        ):
            model = make_tiny_model("vlmot_agvp", seed=53, agvp_guidance=guidance)
            inputs = batch_inputs(tiny_episodes[:2])
            out = model.forward(
                inputs["images_backbone"], inputs["instruction_ids"], inputs["images_expert"]
            )
            assert out.saliency.source == source
            m = model.cfg.expert.patch_token_count
            assert out.saliency.weights.shape == (2, m)

    def test_single_layer_guidance(self, tiny_episodes):
        model = make_tiny_model("vlmot_agvp", seed=54, agvp_layers="single:1")
        inputs = batch_inputs(tiny_episodes[:1])
        out = model.forward(
            inputs["images_backbone"], inputs["instruction_ids"], inputs["images_expert"]
        )
        assert out.prune_indices is not None

    def test_guidance_layer_must_be_shallow(self, tiny_episodes):
        model = make_tiny_model("vlmot_agvp", seed=55, agvp_layers="single:3")
        inputs = batch_inputs(tiny_episodes[:1])
        with pytest.raises(ContractViolation):
            model.forward(
                inputs["images_backbone"], inputs["instruction_ids"], inputs["images_expert"]
            )

    def test_feedback_modes_differ_but_share_selection(self, tiny_episodes):
        coupled = make_tiny_model("vlmot_agvp", seed=56)
        inject = make_tiny_model(
            "vlmot_agvp", seed=56,
            coupling=CouplingConfig(coupled_count=2, feedback="inject_only"),
        )
        inputs = batch_inputs(tiny_episodes[:2])
        a = coupled.forward(
            inputs["images_backbone"], inputs["instruction_ids"], inputs["images_expert"]
        )
        b = inject.forward(
            inputs["images_backbone"], inputs["instruction_ids"], inputs["images_expert"]
        )
        # same shallow layers, same saliency -> same kept tokens
        assert np.array_equal(a.prune_indices, b.prune_indices)
        assert np.abs(a.chunk.data - b.chunk.data).max() > 0  # paths differ


class TestInputFusion:
    def test_fused_merger_shape(self):
        model = make_tiny_model("input_fusion", seed=57)
        c = model.cfg
        merged = c.backbone.hidden_dim * c.backbone.merge**2
        assert model.params.arrays["bb.merge.w1"].shape == (
            merged + c.expert.hidden_dim, merged,
        )

    def test_expert_content_changes_output(self, tiny_episodes):
        model = make_tiny_model("input_fusion", seed=58)
        inputs = batch_inputs(tiny_episodes[:1])
        a = model.predict(
            inputs["images_backbone"], inputs["instruction_ids"], inputs["images_expert"]
        )
        noisy = inputs["images_expert"] + 0.05
        b = model.predict(inputs["images_backbone"], inputs["instruction_ids"], noisy)
        assert np.abs(a - b).max() > 0


class TestHiddenCollection:
    def test_layer_count(self, tiny_episodes):
        for mode in ("baseline", "vlmot_agvp"):
            model = make_tiny_model(mode, seed=59)
            inputs = batch_inputs(tiny_episodes[:1])
            out = model.forward(
                inputs["images_backbone"], inputs["instruction_ids"],
                inputs["images_expert"], collect_hidden=True,
            )
            assert len(out.hidden) == model.cfg.backbone.layer_count + 1
            assert len(out.attention_maps) == model.cfg.backbone.layer_count

    def test_attention_shapes_in_coupled_region(self, tiny_episodes):
        model = make_tiny_model("vlmot_agvp", seed=60)
        inputs = batch_inputs(tiny_episodes[:1])
        out = model.forward(
            inputs["images_backbone"], inputs["instruction_ids"],
            inputs["images_expert"], record_attn=True,
        )
        n = model.layout.total
        k = out.prune_indices.shape[1]
        shallow = model.cfg.shallow_count
        for i, attn in enumerate(out.attention_maps):
            want = n if i < shallow else n + k
            assert attn.shape[-1] == want
