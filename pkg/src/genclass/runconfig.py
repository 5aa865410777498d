"""Training run configuration: key=value files and manifest-driven training.

Documented keys (others are rejected):
    steps, batch_size, lr, warmup_steps, ema_decay, image_size, T,
    schedule_kind, beta_start, beta_end, channels, base_channels,
    channel_mults, blocks_per_level, seed, val_interval, log_interval,
    grad_clip, flips, rotation_degrees, jitter, mixup_alpha
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .data import (
    AugmentationSpec,
    ColorJitterSpec,
    DatasetManifest,
    split_images,
)
from .diffusion.checkpoint import Checkpoint
from .diffusion.denoiser import ConditionedDenoiser, DenoiserConfig
from .diffusion.schedule import build_schedule
from .diffusion.training import TrainConfig, train

_DEFAULTS: dict[str, object] = {
    "steps": 1000,
    "batch_size": 16,
    "lr": 1e-3,
    "warmup_steps": 100,
    "ema_decay": 0.999,
    "image_size": 32,
    "T": 1000,
    "schedule_kind": "linear_beta",
    "beta_start": 1e-4,
    "beta_end": 0.02,
    "channels": 1,
    "base_channels": 48,
    "channel_mults": (1, 2, 2),
    "blocks_per_level": 1,
    "seed": 0,
    "val_interval": 250,
    "log_interval": 50,
    "grad_clip": 1.0,
    "flips": True,
    "rotation_degrees": 360.0,
    "jitter": True,
    "mixup_alpha": 0.3,
}


def _coerce(key: str, raw: str) -> object:
    default = _DEFAULTS[key]
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.split(","))
    return raw


def parse_train_config(path: str | Path) -> dict:
    """Read a key=value config file with # comments."""
    config: dict[str, object] = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _DEFAULTS:
            raise ValueError(f"{path}:{line_no}: unknown key {key!r}")
        config[key] = _coerce(key, raw)
    return config


def resolve_train_config(overrides: dict) -> dict:
    unknown = set(overrides) - set(_DEFAULTS)
    if unknown:
        raise ValueError(f"unknown training config keys: {sorted(unknown)}")
    merged = dict(_DEFAULTS)
    merged.update(overrides)
    if isinstance(merged["channel_mults"], list):
        merged["channel_mults"] = tuple(merged["channel_mults"])
    return merged


def train_from_manifest(
    manifest: DatasetManifest,
    config: dict,
    seed: int | None,
    out_path: str | Path,
    log_path: str | Path | None = None,
) -> Checkpoint:
    """Build model and schedule from config, train on the manifest splits."""
    cfg = resolve_train_config(config)
    if seed is not None:
        cfg["seed"] = seed
    K = len(manifest.class_names)

    schedule = build_schedule(
        int(cfg["T"]),
        str(cfg["schedule_kind"]),
        **(
            {"beta_start": cfg["beta_start"], "beta_end": cfg["beta_end"]}
            if cfg["schedule_kind"] == "linear_beta"
            else {}
        ),
    )
    arch = DenoiserConfig(
        channels=int(cfg["channels"]),
        image_size=int(cfg["image_size"]),
        base_channels=int(cfg["base_channels"]),
        channel_mults=tuple(cfg["channel_mults"]),
        blocks_per_level=int(cfg["blocks_per_level"]),
        cond_rows=8,
        cond_cols=max(K, 8),
    )
    torch.manual_seed(int(cfg["seed"]))
    model = ConditionedDenoiser(arch)

    aug = AugmentationSpec(
        flips=bool(cfg["flips"]),
        rotation_degrees=float(cfg["rotation_degrees"]),
        color_jitter=ColorJitterSpec() if cfg["jitter"] else None,
        mixup_alpha=float(cfg["mixup_alpha"]),
    )
    train_cfg = TrainConfig(
        steps=int(cfg["steps"]),
        batch_size=int(cfg["batch_size"]),
        lr=float(cfg["lr"]),
        warmup_steps=int(cfg["warmup_steps"]),
        ema_decay=float(cfg["ema_decay"]),
        grad_clip=float(cfg["grad_clip"]) if cfg["grad_clip"] else None,
        val_interval=int(cfg["val_interval"]),
        log_interval=int(cfg["log_interval"]),
        seed=int(cfg["seed"]),
        augmentation=aug,
    )

    images, labels, _ = split_images(manifest, "train")
    try:
        val_images, val_labels, _ = split_images(manifest, "val")
    except Exception:
        val_images, val_labels = None, None
    if val_images is not None and len(val_images) == 0:
        val_images, val_labels = None, None

    return train(
        model,
        schedule,
        images,
        labels,
        list(manifest.class_names),
        train_cfg,
        out_path,
        val_images=val_images,
        val_labels=val_labels,
        log_path=log_path,
    )
