import numpy as np
import pytest

from vlmt.gradcheck import (
    GradCheckReport,
    finite_diff_check,
    finite_diff_report,
    tiny_inputs,
    tiny_model_config,
)
from vlmt.model import Model

MODES = ("baseline", "vlmot", "vlmot_agvp")


class TestTinyConfigs:
    @pytest.mark.parametrize("mode", MODES)
    def test_f32_bound(self, mode):
        report = finite_diff_check(mode, seed=0, use_f64=False)
        assert report.max_rel_error <= 1e-3, report.worst(3)

    @pytest.mark.parametrize("mode", MODES + ("input_fusion",))
    def test_f64_bound(self, mode):
        report = finite_diff_check(mode, seed=0, use_f64=True)
        assert report.max_rel_error <= 1e-6, report.worst(3)

    def test_inject_only_feedback_mode(self):
        from vlmt.coupling import CouplingConfig

        cfg = tiny_model_config(
            "vlmot", coupling=CouplingConfig(coupled_count=2, feedback="inject_only")
        )
        model = Model(cfg, dtype=np.float64)
        model.init_params(3)
        report = finite_diff_report(model, tiny_inputs(3), seed=3, eps=1e-5)
        assert report.max_rel_error <= 1e-6

    def test_alignment_groups_receive_gradient(self):
        # .k and .v feed backbone rows at every pair; .q only feeds the
        # expert branch, which is a dead end at the final coupled pair
        report = finite_diff_check("vlmot", seed=1, use_f64=True)
        kv = [g for g in report.groups if ".align.k" in g.name or ".align.v" in g.name]
        assert kv and all(abs(g.analytic) > 0 for g in kv)
        assert any(abs(g.analytic) > 0 for g in report.groups if ".align.q" in g.name)

    def test_report_covers_every_parameter(self):
        model = Model(tiny_model_config("vlmot_agvp"))
        model.init_params(0)
        report = finite_diff_report(model, tiny_inputs(0), seed=0, eps=1e-3)
        assert {g.name for g in report.groups} == set(model.params.arrays)


class TestZeroParamModel:
    def test_empty_report(self):
        class Hollow:
            dtype = np.dtype(np.float32)

            class cfg:
                mode = "baseline"

            class params:
                arrays: dict = {}

                @staticmethod
                def names():
                    return []

                @staticmethod
                def view(tape):
                    return None

            @staticmethod
            def predict(*a, **k):
                return np.zeros((1, 2, 3), dtype=np.float32)

            @staticmethod
            def forward(*a, **k):
                import vlmt.tensor as T

                class R:
                    chunk = T.Tensor(np.zeros((1, 2, 3), dtype=np.float32))

                return R()

        report = finite_diff_report(Hollow(), tiny_inputs(0), seed=0, eps=1e-3)
        assert report.groups == []
        assert report.max_rel_error == 0.0
