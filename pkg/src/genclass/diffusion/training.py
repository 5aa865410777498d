"""Training loop for the conditioned denoiser."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..data import AugmentationSpec, augment
from .checkpoint import Checkpoint, save_checkpoint
from .conditioning import class_condition, stack_conditions
from .denoiser import ConditionedDenoiser
from .process import training_loss
from .schedule import NoiseSchedule


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes NaN or Inf."""


@dataclass
class TrainConfig:
    steps: int
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 100
    ema_decay: float = 0.999
    weight_decay: float = 0.01
    grad_clip: float | None = 1.0
    val_interval: int = 250
    log_interval: int = 50
    seed: int = 0
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)

    def to_metadata(self) -> dict:
        d = asdict(self)
        if d["augmentation"]["color_jitter"] is not None:
            d["augmentation"]["color_jitter"] = dict(d["augmentation"]["color_jitter"])
        return d


def _build_batch(
    images: torch.Tensor,
    labels: np.ndarray,
    idx: np.ndarray,
    num_classes: int,
    cond_rows: int,
    cond_cols: int,
    aug: AugmentationSpec | None,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    conds = [
        class_condition(int(labels[i]), num_classes, cond_rows, cond_cols) for i in idx
    ]
    imgs = [images[i] for i in idx]
    if aug is None:
        return torch.stack(imgs), stack_conditions(conds)
    partners = rng.permutation(len(idx))
    out_imgs, out_conds = [], []
    for j in range(len(idx)):
        partner = None
        if aug.mixup_alpha > 0:
            pj = int(partners[j])
            partner = (imgs[pj], conds[pj])
        img, cond, _ = augment(imgs[j], conds[j], aug, rng, partner=partner)
        out_imgs.append(img)
        out_conds.append(cond)
    return torch.stack(out_imgs), stack_conditions(out_conds)


@torch.no_grad()
def _ema_update(ema: dict[str, torch.Tensor], model: ConditionedDenoiser, decay: float):
    for name, p in model.state_dict().items():
        ema[name].mul_(decay).add_(p, alpha=1.0 - decay)


@torch.no_grad()
def _validation_loss(
    model: ConditionedDenoiser,
    schedule: NoiseSchedule,
    images: torch.Tensor,
    conds: torch.Tensor,
    batch_size: int,
    seed: int,
) -> float:
    # Fixed generator: the same noise draws every evaluation, so the
    # curve reflects parameter movement only.
    gen = torch.Generator().manual_seed(seed)
    model.eval()
    total, count = 0.0, 0
    for start in range(0, len(images), batch_size):
        stop = min(start + batch_size, len(images))
        loss = training_loss(images[start:stop], conds[start:stop], model, schedule, gen)
        total += float(loss) * (stop - start)
        count += stop - start
    model.train()
    return total / count


def train(
    model: ConditionedDenoiser,
    schedule: NoiseSchedule,
    images: torch.Tensor,
    labels: np.ndarray,
    class_names: list[str],
    config: TrainConfig,
    out_path: str | Path,
    val_images: torch.Tensor | None = None,
    val_labels: np.ndarray | None = None,
    log_path: str | Path | None = None,
) -> Checkpoint:
    """Train the denoiser and persist a checkpoint with EMA weights.

    images: (N, C, H, W) in [-1, 1]; labels: (N,) class indices.
    The training log is append-only JSONL rows {step, loss, val_loss}.
    """
    if len(images) == 0:
        raise ValueError("dataset is empty")
    cfg = config
    arch = model.config
    K = len(class_names)

    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)

    opt = torch.optim.AdamW(
        model.parameters(),
        lr=cfg.lr,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=cfg.weight_decay,
    )
    ema = {k: v.detach().clone().float() for k, v in model.state_dict().items()}

    val_conds = None
    if val_images is not None and len(val_images) > 0:
        val_idx = np.arange(len(val_images))
        val_conds = stack_conditions(
            [
                class_condition(int(val_labels[i]), K, arch.cond_rows, arch.cond_cols)
                for i in val_idx
            ]
        )

    log_file = open(log_path, "a") if log_path is not None else None

    def log_row(row: dict) -> None:
        if log_file is not None:
            log_file.write(json.dumps(row, sort_keys=True) + "\n")
            log_file.flush()

    model.train()
    running: list[float] = []
    last_val: float | None = None
    try:
        for step in range(1, cfg.steps + 1):
            for group in opt.param_groups:
                scale = min(1.0, step / cfg.warmup_steps) if cfg.warmup_steps > 0 else 1.0
                group["lr"] = cfg.lr * scale

            idx = rng.choice(len(images), size=min(cfg.batch_size, len(images)), replace=False)
            batch, conds = _build_batch(
                images, labels, idx, K, arch.cond_rows, arch.cond_cols,
                cfg.augmentation, rng,
            )
            loss = training_loss(batch, conds, model, schedule, gen)
            loss_val = float(loss.detach())
            if not math.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss {loss_val} at step {step}; "
                    f"lr={opt.param_groups[0]['lr']:.3g}, batch={sorted(idx.tolist())}"
                )
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            _ema_update(ema, model, cfg.ema_decay)

            running.append(loss_val)
            if val_conds is not None and step % cfg.val_interval == 0:
                last_val = _validation_loss(
                    model, schedule, val_images, val_conds, cfg.batch_size, cfg.seed + 2
                )
            if step % cfg.log_interval == 0 or step == cfg.steps:
                log_row(
                    {
                        "step": step,
                        "loss": sum(running) / len(running),
                        "val_loss": last_val,
                    }
                )
                running = []
    finally:
        if log_file is not None:
            log_file.close()

    model.eval()
    ckpt = Checkpoint(
        arch=arch,
        schedule=schedule,
        class_names=list(class_names),
        state={k: v.detach().clone() for k, v in model.state_dict().items()},
        ema_state=ema,
        step=cfg.steps,
        metadata={"train_config": cfg.to_metadata(), "final_val_loss": last_val},
    )
    save_checkpoint(ckpt, out_path)
    return ckpt
