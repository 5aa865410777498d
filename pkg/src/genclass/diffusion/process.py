"""Forward and reverse diffusion, the training objective, and sampling."""

from __future__ import annotations

import math

import numpy as np
import torch

from .codec import LatentCodec
from .conditioning import ConditioningMatrix, class_condition
from .schedule import NoiseSchedule, snr, training_weight


def forward_marginal(
    z0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Closed-form noising: sqrt(a_bar_t) * z0 + sqrt(1 - a_bar_t) * eps."""
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    a_bar = schedule.alpha_bar_at(t)
    return math.sqrt(a_bar) * z0 + math.sqrt(1.0 - a_bar) * eps


def forward_step(
    z_prev: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    generator: torch.Generator,
) -> torch.Tensor:
    """One Markov noising step: sample N(sqrt(a_t) z_{t-1}, (1 - a_t) I)."""
    a = schedule.alpha_at(t)
    noise = torch.randn(
        z_prev.shape, generator=generator, dtype=z_prev.dtype, device=z_prev.device
    )
    return math.sqrt(a) * z_prev + math.sqrt(1.0 - a) * noise


def training_loss(
    z0: torch.Tensor,
    cond: torch.Tensor,
    model: torch.nn.Module,
    schedule: NoiseSchedule,
    generator: torch.Generator,
) -> torch.Tensor:
    """Noise-prediction objective.

    Per item draws t ~ U[1, T] and eps ~ N(0, I), then averages
    w_t * ||eps - eps_theta(z_t, t, c)||^2 over the batch, with
    w_t = min{5/SNR(t), 1}.  The norm is the full squared L2 norm over
    the latent.  z0: (B, C, H, W); cond: (B, R, D).
    """
    if z0.ndim != 4 or z0.shape[0] == 0:
        raise ValueError("z0 must be a non-empty (B, C, H, W) batch")
    B = z0.shape[0]
    T = schedule.T
    t = torch.randint(1, T + 1, (B,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)

    a_bar = torch.as_tensor(
        schedule.alpha_bar[(t - 1).numpy()], dtype=z0.dtype
    ).view(B, 1, 1, 1)
    z_t = torch.sqrt(a_bar) * z0 + torch.sqrt(1.0 - a_bar) * eps

    pred = model(z_t, t, cond)
    sq_err = (eps - pred).reshape(B, -1).pow(2).sum(dim=1)
    w = torch.as_tensor(
        [training_weight(int(ti), schedule) for ti in t], dtype=z0.dtype
    )
    return (w * sq_err).mean()


def _denoise_jump(
    z: torch.Tensor,
    t_cur: int,
    t_next: int,
    eps_pred: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator | None,
) -> torch.Tensor:
    """Ancestral step from t_cur down to t_next (t_next=0 means clean).

    Uses the mean (z - (1-a_eff)/sqrt(1-a_bar_cur) * eps_pred)/sqrt(a_eff)
    where a_eff = a_bar_cur / a_bar_next; with stride 1 this is the
    single-step reverse mean.  Noise of variance (1 - a_eff) is added
    except on the final jump to t_next=0.
    """
    a_bar_cur = schedule.alpha_bar_at(t_cur)
    a_bar_next = 1.0 if t_next == 0 else schedule.alpha_bar_at(t_next)
    a_eff = a_bar_cur / a_bar_next
    mean = (z - (1.0 - a_eff) / math.sqrt(1.0 - a_bar_cur) * eps_pred) / math.sqrt(a_eff)
    if t_next == 0:
        return mean
    if generator is None:
        raise ValueError("generator required for noisy reverse steps")
    noise = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
    return mean + math.sqrt(1.0 - a_eff) * noise


def reverse_step(
    z_t: torch.Tensor,
    t: int,
    cond: ConditioningMatrix,
    model: torch.nn.Module,
    schedule: NoiseSchedule,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Single learned denoising step z_t -> z_{t-1}.

    At t=1 the mean is returned without injected noise.
    """
    schedule._check_t(t)
    batch = z_t.unsqueeze(0)
    t_tensor = torch.tensor([t], dtype=torch.long)
    with torch.no_grad():
        eps_pred = model(batch, t_tensor, cond.matrix.unsqueeze(0).to(z_t.dtype))[0]
    return _denoise_jump(z_t, t, t - 1, eps_pred, schedule, generator)


def sampling_timesteps(T: int, steps: int) -> list[int]:
    """Strided descending subsequence of [1, T]; steps=T gives stride 1."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    ts = np.unique(np.round(np.linspace(T, 1, steps)).astype(int))[::-1]
    return [int(t) for t in ts]


def sample(
    class_index: int,
    steps: int,
    model: torch.nn.Module,
    schedule: NoiseSchedule,
    codec: LatentCodec,
    generator: torch.Generator,
    *,
    num_classes: int,
    latent_shape: tuple[int, int, int],
    cond_rows: int = 8,
    cond_cols: int | None = None,
    count: int = 1,
) -> torch.Tensor:
    """Generate images for one class by running the strided reverse chain.

    Returns a (count, C, H, W) tensor of decoded images.  Deterministic
    for a given generator state.
    """
    cond = class_condition(class_index, num_classes, cond_rows, cond_cols)
    cond_batch = cond.matrix.unsqueeze(0).expand(count, -1, -1)
    ts = sampling_timesteps(schedule.T, steps)
    z = torch.randn((count, *latent_shape), generator=generator)
    with torch.no_grad():
        for i, t_cur in enumerate(ts):
            t_next = ts[i + 1] if i + 1 < len(ts) else 0
            t_tensor = torch.full((count,), t_cur, dtype=torch.long)
            eps_pred = model(z, t_tensor, cond_batch)
            z = _denoise_jump(z, t_cur, t_next, eps_pred, schedule, generator)
    return codec.decode(z)
