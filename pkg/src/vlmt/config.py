"""Flat key=value configuration shared by the CLI, trainer, and checkpoints.

Config files are plain text, one ``key = value`` per line with ``#``
comments. CLI flags override file values, which override the defaults
below. The same flat dict is echoed into checkpoints so a saved model is
self-describing.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import backbone as bb
from . import coupling as cpl
from . import expert as ex
from .model import Model, ModelConfig
from .world import WorldConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "model.mode": "baseline",
    "backbone.layers": 8,
    "backbone.dim": 64,
    "backbone.heads": 4,
    "backbone.mlp_ratio": 4,
    "backbone.visual_bidir": False,
    "expert.layers": 8,
    "expert.dim": 48,
    "expert.heads": 4,
    "expert.mlp_ratio": 4,
    "expert.cls": True,
    "coupling.n": 4,
    "coupling.selection": "last",
    "coupling.feedback": "coupled",
    "agvp.ratio": 0.5,
    "agvp.guidance": "action",
    "agvp.layers": "range",
    "world.grid_extent": 64,
    "world.num_objects": 3,
    "world.half_size_min": 3,
    "world.half_size_max": 6,
    "world.backbone_resolution": 64,
    "world.expert_resolution": 128,
    "world.patch_size": 8,
    "world.merge": 2,
    "world.horizon": 8,
    "world.step_cap": 8.0,
    "world.palette_size": 8,
    "train.lr": 1e-3,
    "train.weight_decay": 1e-4,
    "train.batch_size": 32,
    "train.steps": 3000,
    "train.warmup": 100,
    "train.eval_every": 250,
    "train.seed": 0,
}


def _convert(key: str, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw.strip()


def parse_config_file(path: str) -> dict:
    values: dict[str, object] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _convert(key, raw)
    return values


def apply_overrides(cfg: dict, pairs: list[str]) -> None:
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = (part.strip() for part in pair.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _convert(key, raw)


def resolve(file_path: str | None = None, overrides: list[str] | None = None) -> dict:
    cfg = dict(DEFAULTS)
    if file_path:
        cfg.update(parse_config_file(file_path))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg


def config_echo(cfg: dict) -> str:
    lines = [f"{key} = {cfg[key]}" for key in sorted(cfg)]
    return "\n".join(lines) + "\n"


def world_config_from_flat(cfg: dict) -> WorldConfig:
    return WorldConfig(
        grid_extent=cfg["world.grid_extent"],
        num_objects=cfg["world.num_objects"],
        half_size_min=cfg["world.half_size_min"],
        half_size_max=cfg["world.half_size_max"],
        backbone_resolution=cfg["world.backbone_resolution"],
        expert_resolution=cfg["world.expert_resolution"],
        patch_size=cfg["world.patch_size"],
        merge=cfg["world.merge"],
        horizon=cfg["world.horizon"],
        step_cap=cfg["world.step_cap"],
        palette_size=cfg["world.palette_size"],
        seed=cfg.get("world.seed", 0),
    )


def model_config_from_flat(cfg: dict) -> ModelConfig:
    backbone = bb.BackboneConfig(
        hidden_dim=cfg["backbone.dim"],
        layer_count=cfg["backbone.layers"],
        head_count=cfg["backbone.heads"],
        mlp_ratio=cfg["backbone.mlp_ratio"],
        resolution=cfg["world.backbone_resolution"],
        patch_size=cfg["world.patch_size"],
        merge=cfg["world.merge"],
        action_token_count=cfg["world.horizon"],
        action_dim=3,
        visual_bidir=cfg["backbone.visual_bidir"],
    )
    expert = ex.ExpertConfig(
        hidden_dim=cfg["expert.dim"],
        layer_count=cfg["expert.layers"],
        head_count=cfg["expert.heads"],
        mlp_ratio=cfg["expert.mlp_ratio"],
        resolution=cfg["world.expert_resolution"],
        patch_size=cfg["world.patch_size"],
        cls_token=cfg["expert.cls"],
    )
    coupling = cpl.CouplingConfig(
        coupled_count=cfg["coupling.n"],
        selection=cfg["coupling.selection"],
        feedback=cfg["coupling.feedback"],
    )
    return ModelConfig(
        mode=cfg["model.mode"],
        backbone=backbone,
        expert=expert,
        coupling=coupling,
        agvp_ratio=cfg["agvp.ratio"],
        agvp_guidance=cfg["agvp.guidance"],
        agvp_layers=cfg["agvp.layers"],
    )


@dataclass(frozen=True)
class TrainSettings:
    lr: float
    weight_decay: float
    batch_size: int
    steps: int
    warmup: int
    eval_every: int
    seed: int


def train_settings_from_flat(cfg: dict) -> TrainSettings:
    ts = TrainSettings(
        lr=cfg["train.lr"],
        weight_decay=cfg["train.weight_decay"],
        batch_size=cfg["train.batch_size"],
        steps=cfg["train.steps"],
        warmup=cfg["train.warmup"],
        eval_every=cfg["train.eval_every"],
        seed=cfg["train.seed"],
    )
    if ts.lr < 0 or ts.batch_size <= 0 or ts.steps < 0 or ts.eval_every <= 0:
        raise ConfigError("training rates and budgets must be positive")
    return ts


def model_from_checkpoint(path: str):
    """Rebuild a model from a checkpoint's config echo and parameters."""
    from .checkpoint import CheckpointError, load_checkpoint

    meta, arrays = load_checkpoint(path)
    flat = dict(DEFAULTS)
    flat.update(meta.get("config", {}))
    model = Model(model_config_from_flat(flat))
    model.init_params(0)
    expected = set(model.params.arrays)
    got = set(arrays)
    if expected != got:
        missing = sorted(expected - got)[:3]
        extra = sorted(got - expected)[:3]
        raise CheckpointError(
            f"{path}: parameter set does not match config "
            f"(missing {missing}, unexpected {extra})"
        )
    for name, arr in arrays.items():
        if model.params.arrays[name].shape != arr.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: "
                f"{arr.shape} vs {model.params.arrays[name].shape}"
            )
        model.params.arrays[name] = arr
    model.meta.update(meta.get("state", {}))
    return model, flat
