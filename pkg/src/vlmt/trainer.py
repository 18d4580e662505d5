"""End-to-end optimization and evaluation on the synthetic world.

Training minimizes the mean absolute difference between predicted and
expert action chunks with decoupled-weight-decay Adam over shuffled
mini-batches. Everything is seed-deterministic in single-threaded use:
the metrics log and checkpoints are byte-reproducible.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import TrainSettings
from .model import Model, batch_inputs
from .tensor import ContractViolation
from .world import ActionChunk, Episode, WorldConfig, instruction_tokens, render

METRICS_NAME = "metrics.csv"
FINAL_CKPT = "final.ckpt"
BEST_CKPT = "best.ckpt"


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; a diagnostic dump was written."""


def l1_chunk_loss(pred, gt) -> float:
    """Mean absolute difference over every chunk component."""
    p = pred.steps if isinstance(pred, ActionChunk) else np.asarray(pred)
    g = gt.steps if isinstance(gt, ActionChunk) else np.asarray(gt)
    if p.shape != g.shape:
        raise ContractViolation(f"chunk shapes differ: {p.shape} vs {g.shape}")
    return float(np.abs(p.astype(np.float64) - g.astype(np.float64)).mean())


class AdamW:
    """Adam with decoupled weight decay and linear warmup.

    Decay is skipped for 1-D parameters (norm scales, biases, embeddings'
    rows are matrices and do decay).
    """

    def __init__(
        self, store, lr, weight_decay=0.0, warmup=0, betas=(0.9, 0.999),
        eps=1e-8, clip_norm=1.0,
    ):
        self.store = store
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup = warmup
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.m = {k: np.zeros_like(v) for k, v in store.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.arrays.items()}

    def step(self, grads: dict[str, np.ndarray], t: int) -> None:
        lr_t = self.lr
        if self.warmup > 0:
            lr_t *= min(1.0, t / self.warmup)
        scale = 1.0
        if self.clip_norm:
            total = np.sqrt(
                sum(float((g * g).sum()) for g in grads.values())
            )
            if total > self.clip_norm:
                scale = self.clip_norm / total
        b1c = 1.0 - self.beta1**t
        b2c = 1.0 - self.beta2**t
        for name, p in self.store.arrays.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            elif scale != 1.0:
                g = g * scale
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            if self.weight_decay and p.ndim >= 2:
                update = update + self.weight_decay * p
            p -= (lr_t * update).astype(p.dtype, copy=False)


@dataclass
class EvalMetrics:
    mean_l1: float
    endpoint_error: float
    per_color: dict[int, float]
    count: int

    def to_dict(self) -> dict:
        return {
            "mean_l1": self.mean_l1,
            "endpoint_error": self.endpoint_error,
            "per_color": {str(k): v for k, v in sorted(self.per_color.items())},
            "count": self.count,
        }


def _forward_batches(model: Model, episodes: list[Episode], batch_size: int = 64):
    for start in range(0, len(episodes), batch_size):
        chunk = episodes[start : start + batch_size]
        inputs = batch_inputs(chunk)
        pred = model.predict(
            inputs["images_backbone"], inputs["instruction_ids"], inputs["images_expert"]
        )
        yield chunk, inputs, pred


def evaluate(model: Model, episodes: list[Episode], world: WorldConfig) -> EvalMetrics:
    """Deterministic metrics, invariant to episode ordering (exact sums)."""
    if not episodes:
        raise ContractViolation("cannot evaluate on an empty dataset")
    per_episode_l1: dict[int, float] = {}
    per_episode_end: dict[int, float] = {}
    colors: dict[int, int] = {}
    for chunk_eps, inputs, pred in _forward_batches(model, episodes):
        err = np.abs(pred.astype(np.float64) - inputs["actions"].astype(np.float64))
        l1 = err.mean(axis=(1, 2))
        for i, ep in enumerate(chunk_eps):
            per_episode_l1[ep.id] = float(l1[i])
            per_episode_end[ep.id] = _endpoint_error(pred[i], ep, world)
            colors[ep.id] = ep.instruction
    ids = sorted(per_episode_l1)
    mean_l1 = math.fsum(per_episode_l1[i] for i in ids) / len(ids)
    mean_end = math.fsum(per_episode_end[i] for i in ids) / len(ids)
    per_color: dict[int, float] = {}
    for color in sorted(set(colors.values())):
        members = [i for i in ids if colors[i] == color]
        per_color[color] = math.fsum(per_episode_l1[i] for i in members) / len(members)
    return EvalMetrics(mean_l1, mean_end, per_color, len(ids))


def _endpoint_error(pred_chunk: np.ndarray, episode: Episode, world: WorldConfig) -> float:
    target = episode.scene.object_by_color(episode.instruction)
    pos = np.array(episode.scene.gripper_start, dtype=np.float64)
    pos += pred_chunk[:, :2].astype(np.float64).sum(axis=0) * world.step_cap
    delta = pos - np.array(target.center, dtype=np.float64)
    return float(np.hypot(delta[0], delta[1]) / world.grid_extent)


def closed_loop_success(
    model: Model, episodes: list[Episode], world: WorldConfig, max_chunks: int = 3
) -> float:
    """Re-render after each executed chunk; success = gripping inside the
    target box within the budget."""
    wins = 0
    for ep in episodes:
        scene = ep.scene
        target = scene.object_by_color(ep.instruction)
        pos = np.array(scene.gripper_start, dtype=np.float64)
        done = False
        for _ in range(max_chunks):
            moved = replace(
                scene, gripper_start=(int(round(pos[0])), int(round(pos[1])))
            )
            frame_bb = render(moved, world.backbone_resolution)
            frame_ex = render(moved, world.expert_resolution)
            chunk = model.infer_chunk(frame_bb, ep.instruction, frame_ex)
            for step in chunk.steps:
                pos += step[:2].astype(np.float64) * world.step_cap
                inside = (
                    abs(pos[0] - target.center[0]) <= target.half_size
                    and abs(pos[1] - target.center[1]) <= target.half_size
                )
                if inside and step[2] > 0:
                    done = True
                    break
            if done:
                break
        wins += int(done)
    return wins / len(episodes) if episodes else 0.0


def _fmt(x) -> str:
    return repr(float(x))


def train(
    model: Model,
    train_episodes: list[Episode],
    eval_episodes: list[Episode],
    settings: TrainSettings,
    world: WorldConfig,
    out_dir: str,
    config_echo: dict | None = None,
) -> dict:
    """Optimize the model; writes metrics.csv, final.ckpt, and best.ckpt.

    Returns a summary dict with the step-0 and final eval numbers.
    """
    if not train_episodes:
        raise ContractViolation("training dataset is empty")
    os.makedirs(out_dir, exist_ok=True)
    opt = AdamW(
        model.params,
        lr=settings.lr,
        weight_decay=settings.weight_decay,
        warmup=settings.warmup,
    )
    rng = np.random.default_rng(settings.seed)
    order = rng.permutation(len(train_episodes))
    cursor = 0
    meta = {"config": dict(config_echo or {}), "state": {"trained": True, "steps": 0}}

    lines = ["step,split,loss,endpoint_error"]
    eval0 = evaluate(model, eval_episodes, world)
    lines.append(f"0,eval,{_fmt(eval0.mean_l1)},{_fmt(eval0.endpoint_error)}")
    best_l1 = eval0.mean_l1
    meta["state"]["steps"] = 0
    save_checkpoint(os.path.join(out_dir, BEST_CKPT), model.params.arrays, meta)

    last_eval = eval0
    for step in range(1, settings.steps + 1):
        if cursor + settings.batch_size > len(order):
            order = rng.permutation(len(train_episodes))
            cursor = 0
        idx = order[cursor : cursor + settings.batch_size]
        cursor += settings.batch_size
        batch = [train_episodes[i] for i in idx]
        inputs = batch_inputs(batch)

        tape = T.Tape()
        out = model.forward(
            inputs["images_backbone"],
            inputs["instruction_ids"],
            inputs["images_expert"],
            tape=tape,
        )
        gt = inputs["actions"].astype(model.dtype)
        loss = T.mean(T.absolute(T.sub(out.chunk, gt)))
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            _dump_divergence(out_dir, step, loss_val, model)
            raise TrainingDiverged(f"non-finite loss {loss_val} at step {step}")
        grads = tape.backward(loss)
        opt.step(grads, step)
        lines.append(f"{step},train,{_fmt(loss_val)},")

        if step % settings.eval_every == 0 or step == settings.steps:
            last_eval = evaluate(model, eval_episodes, world)
            lines.append(
                f"{step},eval,{_fmt(last_eval.mean_l1)},{_fmt(last_eval.endpoint_error)}"
            )
            meta["state"]["steps"] = step
            if last_eval.mean_l1 <= best_l1:
                best_l1 = last_eval.mean_l1
                save_checkpoint(os.path.join(out_dir, BEST_CKPT), model.params.arrays, meta)

    meta["state"]["steps"] = settings.steps
    save_checkpoint(os.path.join(out_dir, FINAL_CKPT), model.params.arrays, meta)
    with open(os.path.join(out_dir, METRICS_NAME), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    model.meta.update(meta["state"])
    return {
        "step0_eval_l1": eval0.mean_l1,
        "final_eval_l1": last_eval.mean_l1,
        "best_eval_l1": best_l1,
        "final_endpoint_error": last_eval.endpoint_error,
        "steps": settings.steps,
    }


def _dump_divergence(out_dir: str, step: int, loss_val: float, model: Model) -> None:
    dump = {
        "step": step,
        "loss": None if not np.isfinite(loss_val) else loss_val,
        "param_norms": {
            name: float(np.linalg.norm(arr.astype(np.float64)))
            for name, arr in model.params.arrays.items()
        },
    }
    with open(os.path.join(out_dir, "divergence.json"), "w", encoding="utf-8") as f:
        json.dump(dump, f, indent=2, sort_keys=True)
