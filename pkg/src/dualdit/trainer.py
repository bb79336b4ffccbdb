"""Optimization loop: AdamW with decoupled weight decay, EMA, gradient
clipping, CSV metrics, and checkpoints that resume bit-exactly.

Reproducibility contract: all stochastic draws of a run come from one
generator whose state is checkpointed, except the per-epoch shuffle, which is
re-derived from (seed, epoch) so a mid-epoch resume sees the same batches.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from . import flow as F
from .errors import ConfigError, NumericError
from .model import DualLevelModel, config_from_dict, config_to_dict
from .tensor import Tape, Tensor

METRICS_HEADER = "step,loss,loss_diff,loss_repa,grad_norm,lr"


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_after_switch: float = 1e-5
    switch_step: Optional[int] = None    # None: never switch
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    ema_decay: float = 0.9999
    clip_norm: float = 1.0
    clip_after_switch: float = 0.5
    batch_size: int = 64
    total_steps: int = 1000
    class_drop_prob: float = 0.1
    align_weight: float = 0.5            # weight of the representation-alignment loss
    align_tap: Optional[int] = None      # patch block to tap; default min(8, depth)
    align_feature_dim: int = 32
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0            # 0: only on demand
    logit_normal_mean: float = 0.0
    logit_normal_std: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.ema_decay < 1.0) and self.ema_decay != 0.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ConfigError("batch_size >= 1 and total_steps >= 0 required")


@dataclass
class TrainState:
    step: int
    params: dict[str, Tensor]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    rng: np.random.Generator
    skipped_steps: int = 0
    consecutive_bad: int = 0
    metrics: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# optimizer pieces
# ---------------------------------------------------------------------------

def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               m: dict[str, np.ndarray], v: dict[str, np.ndarray], step: int,
               lr: float, betas=(0.9, 0.999), weight_decay: float = 0.0,
               eps: float = 1e-8):
    """Bias-corrected Adam with decoupled weight decay; step counts from 1."""
    b1, b2 = betas
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    for name, p in params.items():
        g = grads[name]
        m[name] = b1 * m[name] + (1.0 - b1) * g
        v[name] = b2 * v[name] + (1.0 - b2) * g * g
        update = (m[name] / bc1) / (np.sqrt(v[name] / bc2) + eps)
        p.data -= (lr * update).astype(p.data.dtype)
        if weight_decay:
            p.data -= (lr * weight_decay) * p.data


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds it.

    Returns the pre-clip norm.
    """
    if max_norm <= 0:
        raise ConfigError("max_norm must be positive")
    norm = global_grad_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


def ema_update(ema: dict[str, np.ndarray], params: dict[str, Tensor], decay: float):
    for name, p in params.items():
        ema[name] = decay * ema[name] + (1.0 - decay) * p.data


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1, epoch)))
    return rng.permutation(n)


def init_state(model: DualLevelModel, cfg: TrainConfig,
               projector: Optional[F.AlignmentProjector] = None) -> TrainState:
    params = dict(model.params)
    if projector is not None:
        params.update(projector.params)
    return TrainState(
        step=0,
        params=params,
        m={k: np.zeros_like(t.data) for k, t in params.items()},
        v={k: np.zeros_like(t.data) for k, t in params.items()},
        ema={k: t.data.copy() for k, t in params.items()},
        rng=np.random.default_rng(np.random.PCG64(cfg.seed)),
    )


def save_checkpoint(path, model: DualLevelModel, state: TrainState):
    header = {
        "kind": "train_state",
        "model_config": config_to_dict(model.config),
        "step": state.step,
        "rng_state": state.rng.bit_generator.state,
        "skipped_steps": state.skipped_steps,
        "consecutive_bad": state.consecutive_bad,
    }
    arrays: dict[str, np.ndarray] = {}
    for name, t in state.params.items():
        arrays[f"param.{name}"] = t.data
        arrays[f"adam_m.{name}"] = state.m[name]
        arrays[f"adam_v.{name}"] = state.v[name]
        arrays[f"ema.{name}"] = state.ema[name]
    ckpt.save(path, header, arrays)


def load_checkpoint(path):
    """Returns (header, arrays); use restore_state / load_model to apply."""
    return ckpt.load(path)


def load_model(path, dtype=np.float32, use_ema: bool = True) -> DualLevelModel:
    header, arrays = ckpt.load(path)
    model = DualLevelModel(config_from_dict(header["model_config"]), dtype=dtype)
    prefix = "ema." if use_ema else "param."
    state = {
        name[len(prefix):]: arr for name, arr in arrays.items()
        if name.startswith(prefix) and name[len(prefix):] in model.params
    }
    model.load_state(state)
    return model


def restore_state(model: DualLevelModel, state: TrainState, path):
    header, arrays = ckpt.load(path)
    if header.get("kind") != "train_state":
        raise ConfigError(f"{path} is not a training checkpoint")
    missing = [n for n in state.params if f"param.{n}" not in arrays]
    if missing:
        raise ConfigError(f"checkpoint {path} lacks parameters {missing[:4]}...; "
                          f"was it written with a different configuration?")
    for name, t in state.params.items():
        t.data[...] = arrays[f"param.{name}"]
        state.m[name] = arrays[f"adam_m.{name}"].astype(t.data.dtype)
        state.v[name] = arrays[f"adam_v.{name}"].astype(t.data.dtype)
        state.ema[name] = arrays[f"ema.{name}"].astype(t.data.dtype)
    state.step = int(header["step"])
    state.skipped_steps = int(header["skipped_steps"])
    state.consecutive_bad = int(header["consecutive_bad"])
    rng_state = header["rng_state"]
    state.rng = np.random.default_rng(np.random.PCG64())
    state.rng.bit_generator.state = rng_state
    return state


def metrics_to_csv(rows: list[dict]) -> str:
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(
            f"{r['step']},{r['loss']!r},{r['loss_diff']!r},{r['loss_repa']!r},"
            f"{r['grad_norm']!r},{r['lr']!r}"
        )
    return "\n".join(lines) + "\n"


def train(model: DualLevelModel, dataset, cfg: TrainConfig,
          state: Optional[TrainState] = None, resume_from=None,
          metrics_path=None, checkpoint_dir=None,
          encoder: Optional[F.ToyAlignmentEncoder] = None,
          projector: Optional[F.AlignmentProjector] = None) -> TrainState:
    """Run the optimization loop until cfg.total_steps.

    ``dataset`` provides .images (N, C, H, W in [-1, 1]) and .labels (N,).
    ``resume_from`` restores a checkpoint (after the optimizer state,
    including any alignment projector, has been assembled), so the metric
    stream continues exactly where the uninterrupted run would be.
    """
    mcfg = model.config
    use_align = cfg.align_weight > 0.0
    if use_align:
        if encoder is None:
            encoder = F.ToyAlignmentEncoder(mcfg.patch_size, mcfg.channels,
                                            feature_dim=cfg.align_feature_dim)
        if projector is None:
            projector = F.AlignmentProjector(mcfg.patch_dim, encoder.patch_feature_dim,
                                             seed=cfg.seed, dtype=model.dtype)
    if state is None:
        state = init_state(model, cfg, projector)
    if resume_from is not None:
        restore_state(model, state, resume_from)
    tap = cfg.align_tap if cfg.align_tap is not None else min(8, mcfg.patch_depth)
    if use_align and not (1 <= tap <= mcfg.patch_depth):
        raise ConfigError(
            f"align_tap {tap} outside the patch pathway (depth {mcfg.patch_depth})"
        )

    images = np.asarray(dataset.images)
    labels = np.asarray(dataset.labels)
    n = images.shape[0]
    batches_per_epoch = n // cfg.batch_size
    if batches_per_epoch < 1:
        raise ConfigError(f"dataset of {n} samples is smaller than one batch ({cfg.batch_size})")
    t_sampler = F.logit_normal_sampler(cfg.logit_normal_mean, cfg.logit_normal_std)

    metrics_file = None
    if metrics_path is not None:
        fresh = state.step == 0 or not os.path.exists(metrics_path)
        metrics_file = open(metrics_path, "w" if fresh else "a")
        if fresh:
            metrics_file.write(METRICS_HEADER + "\n")

    try:
        while state.step < cfg.total_steps:
            switched = cfg.switch_step is not None and state.step >= cfg.switch_step
            lr = cfg.lr_after_switch if switched else cfg.lr
            max_norm = cfg.clip_after_switch if switched else cfg.clip_norm

            epoch = state.step // batches_per_epoch
            slot = state.step % batches_per_epoch
            perm = _epoch_permutation(cfg.seed, epoch, n)
            idx = perm[slot * cfg.batch_size:(slot + 1) * cfg.batch_size]
            x0 = images[idx]
            y = labels[idx]

            batch = F.make_flow_batch(x0, state.rng, t_sampler)
            bad = False
            row = {"step": state.step, "loss": float("nan"), "loss_diff": float("nan"),
                   "loss_repa": 0.0, "grad_norm": 0.0, "lr": lr}
            try:
                for t in state.params.values():
                    t.zero_grad()
                with Tape() as tape:
                    if use_align:
                        v, s_tap = model.forward_with_tap(
                            batch.x_t, batch.t, y, tap=tap,
                            drop_rng=state.rng, drop_prob=cfg.class_drop_prob)
                        err = v - Tensor(batch.v_t.astype(model.dtype))
                        loss_diff = (err * err).mean()
                        feats = encoder.evaluate(batch.x0).astype(model.dtype)
                        loss_align = F.loss_alignment(s_tap, feats, projector)
                        loss = loss_diff + Tensor(np.asarray(cfg.align_weight, model.dtype)) * loss_align
                        row["loss_repa"] = float(loss_align.data)
                    else:
                        loss_diff = F.loss_diffusion(model, batch, y,
                                                     drop_rng=state.rng,
                                                     drop_prob=cfg.class_drop_prob)
                        loss = loss_diff
                    row["loss_diff"] = float(loss_diff.data)
                    row["loss"] = float(loss.data)
                if not np.isfinite(row["loss"]):
                    raise NumericError("loss non-finite")
                tape.backward(loss)
                grads = {}
                for name, t in state.params.items():
                    g = t.grad if t.grad is not None else np.zeros_like(t.data)
                    if not np.all(np.isfinite(g)):
                        raise NumericError(f"gradient of {name} non-finite")
                    grads[name] = g
            except NumericError:
                bad = True

            if bad:
                state.skipped_steps += 1
                state.consecutive_bad += 1
                if state.consecutive_bad >= 10:
                    raise NumericError(
                        f"loss non-finite for {state.consecutive_bad} consecutive steps "
                        f"(step {state.step}, lr {lr}, skipped {state.skipped_steps} total)"
                    )
            else:
                state.consecutive_bad = 0
                row["grad_norm"] = clip_gradients(grads, max_norm)
                adamw_step(state.params, grads, state.m, state.v, state.step + 1,
                           lr, cfg.betas, cfg.weight_decay, cfg.adam_eps)
                ema_update(state.ema, state.params, cfg.ema_decay)

            state.metrics.append(row)
            if metrics_file is not None:
                metrics_file.write(
                    f"{row['step']},{row['loss']!r},{row['loss_diff']!r},"
                    f"{row['loss_repa']!r},{row['grad_norm']!r},{row['lr']!r}\n"
                )
            state.step += 1
            if checkpoint_dir is not None and cfg.checkpoint_every > 0 \
                    and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(checkpoint_dir, f"step{state.step:08d}.ckpt"),
                                model, state)
        if checkpoint_dir is not None:
            save_checkpoint(os.path.join(checkpoint_dir, "final.ckpt"), model, state)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return state
