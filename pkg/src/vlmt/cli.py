"""Command-line entry point covering the full pipeline and ablation axes."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    p.add_argument("--mode", choices=("baseline", "vlmot", "vlmot_agvp", "input_fusion"))
    p.add_argument("--coupling-n", type=int, dest="coupling_n")
    p.add_argument("--coupling-selection", choices=("last", "first", "uniform"))
    p.add_argument("--coupling-feedback", choices=("coupled", "inject_only"))
    p.add_argument("--agvp-ratio", type=float)
    p.add_argument("--agvp-guidance", choices=("action", "instruction", "cls"))
    p.add_argument("--agvp-layers", help="'range' or 'single:<layer>'")
    p.add_argument("--prompt-visual-bidir", action="store_true", default=None,
                   help="let visual tokens attend bidirectionally among themselves")


def _resolved_config(args) -> dict:
    from . import config as C

    cfg = C.resolve(getattr(args, "config", None), list(getattr(args, "overrides", [])))
    direct = {
        "model.mode": getattr(args, "mode", None),
        "coupling.n": getattr(args, "coupling_n", None),
        "coupling.selection": getattr(args, "coupling_selection", None),
        "coupling.feedback": getattr(args, "coupling_feedback", None),
        "agvp.ratio": getattr(args, "agvp_ratio", None),
        "agvp.guidance": getattr(args, "agvp_guidance", None),
        "agvp.layers": getattr(args, "agvp_layers", None),
        "backbone.visual_bidir": getattr(args, "prompt_visual_bidir", None),
        "train.seed": getattr(args, "seed", None),
    }
    for key, value in direct.items():
        if value is not None:
            cfg[key] = value
    return cfg


def _parse_layers(spec: str, max_layer: int) -> list[int]:
    if ".." in spec:
        lo, hi = spec.split("..", 1)
        layers = list(range(int(lo), int(hi) + 1))
    else:
        layers = [int(tok) for tok in spec.split(",") if tok]
    for layer in layers:
        if not 1 <= layer <= max_layer:
            raise ValueError(f"layer {layer} outside [1, {max_layer}]")
    return layers


def _parse_floats(spec: str) -> list[float]:
    return [float(tok) for tok in spec.split(",") if tok]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vlmt",
        description="Desk-scale vision-language-action lab: synthetic data, "
        "training, inference, probing, and ablations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic episode dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--eval-data", required=True, help="held-out dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--f64", action="store_true", help="train in float64")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="directory for metrics.json")
    p.add_argument("--closed-loop", action="store_true",
                   help="also roll the controller forward with re-rendering")

    p = sub.add_parser("infer", help="predict a chunk for one episode")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--episode", type=int, required=True)

    p = sub.add_parser("probe-mask", help="layer-wise ROI masking study")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layers", default="1..8", help="e.g. 1..8 or 1,3,5")
    p.add_argument("--fractions", default="0,0.5,1")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--episodes", type=int, default=0, help="limit (0 = all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-episode", action="store_true")

    p = sub.add_parser("probe-attn", help="gradient contribution maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layers", default="1..8")
    p.add_argument("--episodes", type=int, default=8, help="episode count")
    p.add_argument("--heatmaps", action="store_true", help="also write PGM grids")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--modes", default="baseline,vlmot,vlmot_agvp")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--f64", action="store_true")

    p = sub.add_parser("ablate", help="run one ablation axis end to end")
    p.add_argument("--axis", required=True,
                   choices=("paradigm", "selection", "guidance", "layers"))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    _add_config_flags(p)

    return parser


def cmd_gen_data(args) -> int:
    from . import config as C
    from .dataset import generate_dataset

    cfg = _resolved_config(args)
    cfg["world.seed"] = args.seed
    world = C.world_config_from_flat(cfg)
    n = generate_dataset(args.out, world, args.episodes)
    print(f"wrote {n} episodes to {args.out}")
    return 0


def _train_once(cfg: dict, data: str, eval_data: str, out: str, dtype) -> dict:
    from . import config as C
    from .dataset import read_dataset
    from .model import Model
    from .trainer import train

    world, train_eps = read_dataset(data)
    _, eval_eps = read_dataset(eval_data)
    for key, value in (
        ("world.grid_extent", world.grid_extent),
        ("world.backbone_resolution", world.backbone_resolution),
        ("world.expert_resolution", world.expert_resolution),
        ("world.patch_size", world.patch_size),
        ("world.merge", world.merge),
        ("world.horizon", world.horizon),
        ("world.step_cap", world.step_cap),
        ("world.palette_size", world.palette_size),
    ):
        cfg[key] = value
    model = Model(C.model_config_from_flat(cfg), dtype=dtype)
    settings = C.train_settings_from_flat(cfg)
    model.init_params(settings.seed)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as f:
        f.write(C.config_echo(cfg))
    summary = train(model, train_eps, eval_eps, settings, world, out, config_echo=cfg)
    return summary


def cmd_train(args) -> int:
    cfg = _resolved_config(args)
    if args.steps is not None:
        cfg["train.steps"] = args.steps
    dtype = np.float64 if args.f64 else np.float32
    summary = _train_once(cfg, args.data, args.eval_data, args.out, dtype)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .config import model_from_checkpoint, world_config_from_flat
    from .dataset import read_dataset
    from .trainer import closed_loop_success, evaluate

    model, flat = model_from_checkpoint(args.ckpt)
    world, episodes = read_dataset(args.data)
    metrics = evaluate(model, episodes, world)
    payload = metrics.to_dict()
    if args.closed_loop:
        payload["closed_loop_success"] = closed_loop_success(model, episodes, world)
    text = json.dumps(payload, sort_keys=True)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as f:
            f.write(text + "\n")
    print(text)
    return 0


def cmd_infer(args) -> int:
    from .config import model_from_checkpoint
    from .dataset import read_dataset
    from .trainer import l1_chunk_loss

    model, _ = model_from_checkpoint(args.ckpt)
    _, episodes = read_dataset(args.data)
    by_id = {e.id: e for e in episodes}
    if args.episode not in by_id:
        raise KeyError(f"episode {args.episode} not in dataset")
    ep = by_id[args.episode]
    chunk = model.infer_chunk(ep.frame_backbone, ep.instruction, ep.frame_expert)
    print(json.dumps({
        "episode": ep.id,
        "instruction": ep.instruction,
        "chunk": [[float(v) for v in row] for row in chunk.steps],
        "l1_vs_expert": l1_chunk_loss(chunk, ep.actions),
    }, sort_keys=True))
    return 0


def cmd_probe_mask(args) -> int:
    from .config import model_from_checkpoint
    from .dataset import read_dataset
    from .probing import masking_csv, masking_study

    model, _ = model_from_checkpoint(args.ckpt)
    _, episodes = read_dataset(args.data)
    if args.episodes:
        episodes = episodes[: args.episodes]
    layers = _parse_layers(args.layers, model.cfg.backbone.layer_count)
    fractions = _parse_floats(args.fractions)
    rows = masking_study(
        model, episodes, layers, fractions, args.repeats,
        seed=args.seed, aggregate=not args.per_episode,
    )
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "masking.csv")
    with open(path, "w", encoding="utf-8") as f:
        f.write(masking_csv(rows, trained=bool(model.meta.get("trained"))))
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def cmd_probe_attn(args) -> int:
    from .config import model_from_checkpoint
    from .dataset import read_dataset
    from .probing import attribution_csv, contribution_map, graymap_pgm, roi_concentration

    model, _ = model_from_checkpoint(args.ckpt)
    _, episodes = read_dataset(args.data)
    episodes = episodes[: args.episodes]
    layers = _parse_layers(args.layers, model.cfg.backbone.layer_count)
    os.makedirs(args.out, exist_ok=True)
    grid = (model.cfg.backbone.token_grid, model.cfg.backbone.token_grid)
    rows = []
    for layer in layers:
        for ep in episodes:
            scores = contribution_map(model, ep, layer)
            rows.append((layer, ep.id, roi_concentration(scores, ep.roi_backbone)))
            if args.heatmaps:
                name = f"contrib_l{layer}_ep{ep.id}.pgm"
                with open(os.path.join(args.out, name), "w", encoding="utf-8") as f:
                    f.write(graymap_pgm(scores, grid))
    path = os.path.join(args.out, "attribution.csv")
    with open(path, "w", encoding="utf-8") as f:
        f.write(attribution_csv(rows))
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import finite_diff_check

    bound = 1e-6 if args.f64 else 1e-3
    failed = False
    for mode in args.modes.split(","):
        for seed in range(args.seeds):
            report = finite_diff_check(mode.strip(), seed, use_f64=args.f64)
            status = "ok" if report.max_rel_error <= bound else "FAIL"
            failed |= status == "FAIL"
            print(
                f"{mode:<12} seed={seed} dtype={report.dtype} "
                f"max_rel_error={report.max_rel_error:.3e} {status}"
            )
            if status == "FAIL":
                for g in report.worst(3):
                    print(f"    {g.name}: analytic={g.analytic:.6e} fd={g.finite_diff:.6e}")
    return 1 if failed else 0


_ABLATION_AXES = {
    "paradigm": ("model.mode", ("baseline", "input_fusion", "vlmot")),
    "selection": ("coupling.selection", ("first", "uniform", "last")),
    "guidance": ("agvp.guidance", ("action", "instruction", "cls")),
    "layers": ("agvp.layers", ()),
}


def cmd_ablate(args) -> int:
    key, known = _ABLATION_AXES[args.axis]
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if known:
        bad = [v for v in values if v not in known]
        if bad:
            raise ValueError(f"axis {args.axis} accepts {known}, got {bad}")
    summary = {}
    for value in values:
        cfg = _resolved_config(args)
        if args.steps is not None:
            cfg["train.steps"] = args.steps
        cfg[key] = value
        if args.axis == "paradigm" and value == "vlmot":
            cfg["model.mode"] = "vlmot_agvp"  # full method arm: coupling + pruning
        if args.axis in ("selection", "guidance", "layers"):
            cfg["model.mode"] = "vlmot_agvp"
        run_dir = os.path.join(args.out, args.axis, value.replace(":", "_"))
        summary[value] = _train_once(cfg, args.data, args.eval_data, run_dir, np.float32)
    out_path = os.path.join(args.out, f"{args.axis}_summary.json")
    os.makedirs(args.out, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    print(json.dumps({v: s["final_eval_l1"] for v, s in summary.items()}, sort_keys=True))
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "probe-mask": cmd_probe_mask,
    "probe-attn": cmd_probe_attn,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # single-line machine-parsable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
