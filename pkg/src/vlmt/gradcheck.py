"""Finite-difference verification of the tape's reverse-mode gradients.

For every parameter group the analytic directional derivative along the
(normalized) analytic gradient is compared against a central difference of
the loss. The difference quotient is always evaluated in float64 on a cast
copy of the model, so the check isolates backward-pass errors instead of
measuring forward-pass rounding noise; the model under test keeps its own
precision. The regression target is placed away from the L1 kink so the
finite difference never straddles a non-differentiable point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import coupling as cpl
from . import expert as ex
from . import tensor as T
from .model import Model, ModelConfig
from .world import WorldConfig, generate_episode, instruction_tokens


@dataclass(frozen=True)
class GroupCheck:
    name: str
    analytic: float
    finite_diff: float
    rel_error: float


@dataclass
class GradCheckReport:
    mode: str
    dtype: str
    eps: float
    seed: int
    groups: list[GroupCheck]

    @property
    def max_rel_error(self) -> float:
        return max((g.rel_error for g in self.groups), default=0.0)

    def worst(self, n: int = 5) -> list[GroupCheck]:
        return sorted(self.groups, key=lambda g: -g.rel_error)[:n]


def tiny_world_config(seed: int = 0) -> WorldConfig:
    return WorldConfig(
        grid_extent=32,
        num_objects=2,
        half_size_min=3,
        half_size_max=5,
        backbone_resolution=32,
        expert_resolution=32,
        patch_size=8,
        horizon=4,
        step_cap=8.0,
        seed=seed,
    )


def tiny_model_config(mode: str, **overrides) -> ModelConfig:
    backbone = bb.BackboneConfig(
        hidden_dim=16,
        layer_count=4,
        head_count=2,
        mlp_ratio=2,
        resolution=32,
        patch_size=8,
        merge=2,
        action_token_count=4,
        action_dim=3,
    )
    expert = ex.ExpertConfig(
        hidden_dim=12,
        layer_count=3,
        head_count=2,
        mlp_ratio=2,
        resolution=32,
        patch_size=8,
        cls_token=True,
    )
    coupling = cpl.CouplingConfig(coupled_count=2, selection="last", feedback="coupled")
    kwargs = dict(mode=mode, backbone=backbone, expert=expert, coupling=coupling)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def _loss_value(model: Model, inputs: dict, gt: np.ndarray) -> float:
    pred = model.predict(
        inputs["images_backbone"], inputs["instruction_ids"], inputs["images_expert"]
    )
    return float(np.abs(pred.astype(np.float64) - gt).mean())


def _clone_as(model: Model, dtype) -> Model:
    clone = Model(model.cfg, dtype=dtype)
    clone.init_params(0)
    for name, arr in model.params.arrays.items():
        clone.params.arrays[name] = arr.astype(dtype)
    return clone


def finite_diff_report(
    model: Model, inputs: dict, seed: int, eps: float
) -> GradCheckReport:
    """Per-group relative errors between tape gradients and central
    differences of the chunk L1 loss for the given model and inputs."""
    rng = np.random.default_rng(seed)
    pred0 = model.predict(
        inputs["images_backbone"], inputs["instruction_ids"], inputs["images_expert"]
    )
    # keep |pred - gt| >= ~0.9 so perturbations of size eps stay on one
    # side of the absolute-value kink
    gt = (-0.9 * np.where(pred0 >= 0, 1.0, -1.0)).astype(np.float64)

    tape = T.Tape()
    out = model.forward(
        inputs["images_backbone"],
        inputs["instruction_ids"],
        inputs["images_expert"],
        tape=tape,
    )
    loss = T.mean(T.absolute(T.sub(out.chunk, gt.astype(model.dtype))))
    grads = tape.backward(loss)

    names = model.params.names()
    probe = _clone_as(model, np.float64) if names else None
    groups: list[GroupCheck] = []
    for name in names:
        g = grads[name].astype(np.float64)
        norm = float(np.linalg.norm(g))
        if norm > 0:
            v = g / norm
        else:
            v = rng.normal(size=g.shape)
            v /= np.linalg.norm(v)
        arr = probe.params.arrays[name]
        saved = arr.copy()
        arr[...] = saved + eps * v
        lp = _loss_value(probe, inputs, gt)
        arr[...] = saved - eps * v
        lm = _loss_value(probe, inputs, gt)
        arr[...] = saved
        fd = (lp - lm) / (2.0 * eps)
        analytic = float((g * v).sum())
        denom = max(abs(fd), abs(analytic), 1e-10)
        rel = abs(fd - analytic) / denom
        if max(abs(fd), abs(analytic)) < 1e-12:
            rel = 0.0
        groups.append(GroupCheck(name, analytic, fd, rel))
    return GradCheckReport(
        mode=model.cfg.mode,
        dtype=str(model.dtype),
        eps=eps,
        seed=seed,
        groups=groups,
    )


def tiny_inputs(seed: int, world: WorldConfig | None = None) -> dict:
    world = world or tiny_world_config()
    episode = generate_episode(seed, world)
    return {
        "images_backbone": episode.frame_backbone[None],
        "instruction_ids": instruction_tokens(episode.instruction)[None],
        "images_expert": episode.frame_expert[None],
    }


def finite_diff_check(mode: str, seed: int, use_f64: bool = False) -> GradCheckReport:
    """Build the tiny config for a mode and run the per-group check."""
    dtype = np.float64 if use_f64 else np.float32
    eps = 1e-5 if use_f64 else 1e-3
    model = Model(tiny_model_config(mode), dtype=dtype)
    model.init_params(seed)
    return finite_diff_report(model, tiny_inputs(seed), seed, eps)
