"""Trainable noise-prediction network.

A compact residual conv U-Net.  Inputs are a noisy latent z_t, an
integer timestep t (1-based), and a conditioning matrix; the output is a
noise estimate with the same shape as z_t.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 1
    image_size: int = 32
    base_channels: int = 48
    channel_mults: tuple[int, ...] = (1, 2, 2)
    blocks_per_level: int = 1
    cond_rows: int = 8
    cond_cols: int = 8
    emb_dim: int = 128

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half
    ).to(t.device)
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = _norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, c_out)
        self.norm2 = _norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ConditionedDenoiser(nn.Module):
    """Epsilon predictor: (z_t, t, conditioning) -> estimated noise."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        cfg = config
        emb = cfg.emb_dim
        base = cfg.base_channels

        self.time_mlp = nn.Sequential(
            nn.Linear(base, emb), nn.SiLU(), nn.Linear(emb, emb)
        )
        self.cond_mlp = nn.Sequential(
            nn.Linear(cfg.cond_rows * cfg.cond_cols, emb), nn.SiLU(), nn.Linear(emb, emb)
        )

        chans = [base * m for m in cfg.channel_mults]
        self.stem = nn.Conv2d(cfg.channels, chans[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        skip_chans = [chans[0]]
        c_prev = chans[0]
        for level, c in enumerate(chans):
            blocks = nn.ModuleList()
            for _ in range(cfg.blocks_per_level):
                blocks.append(ResBlock(c_prev, c, emb))
                c_prev = c
                skip_chans.append(c)
            self.down_blocks.append(blocks)
            if level < len(chans) - 1:
                self.downsamples.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
                skip_chans.append(c)

        self.middle = ResBlock(c_prev, c_prev, emb)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level in reversed(range(len(chans))):
            c = chans[level]
            blocks = nn.ModuleList()
            for _ in range(cfg.blocks_per_level + 1):
                blocks.append(ResBlock(c_prev + skip_chans.pop(), c, emb))
                c_prev = c
            self.up_blocks.append(blocks)
            if level > 0:
                self.upsamples.append(nn.Conv2d(c, c, 3, padding=1))

        self.out_norm = _norm(c_prev)
        self.out_conv = nn.Conv2d(c_prev, cfg.channels, 3, padding=1)

    def forward(
        self, z_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor
    ) -> torch.Tensor:
        """z_t: (B, C, H, W); t: (B,) integer steps; cond: (B, R, D)."""
        cfg = self.config
        emb = self.time_mlp(timestep_embedding(t, cfg.base_channels))
        emb = emb + self.cond_mlp(cond.reshape(cond.shape[0], -1))

        h = self.stem(z_t)
        skips = [h]
        for level, blocks in enumerate(self.down_blocks):
            for block in blocks:
                h = block(h, emb)
                skips.append(h)
            if level < len(self.downsamples):
                h = self.downsamples[level](h)
                skips.append(h)

        h = self.middle(h, emb)

        for i, blocks in enumerate(self.up_blocks):
            for block in blocks:
                h = block(torch.cat([h, skips.pop()], dim=1), emb)
            if i < len(self.upsamples):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamples[i](h)

        return self.out_conv(F.silu(self.out_norm(h)))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
