"""Counterfactual heatmaps.

For an input image, the mean difference between drawn noise and the
model's class-conditional prediction is accumulated per class; the
deviation of each class's mean tensor from the predicted class's tensor
decodes into an image-space heatmap showing what would have to change
for the input to belong to that class.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .diffusion.codec import LatentCodec
from .diffusion.conditioning import class_condition, stack_conditions
from .diffusion.schedule import NoiseSchedule


@dataclass
class MeanErrorTensor:
    delta: torch.Tensor  # mean of (eps - eps_pred) over draws
    class_index: int
    n_draws: int


@dataclass
class Heatmap:
    values: torch.Tensor  # image-shaped, signed
    source_class: int
    target_class: int


def mean_error_tensors(
    image: torch.Tensor,
    num_classes: int,
    model: torch.nn.Module,
    codec: LatentCodec,
    schedule: NoiseSchedule,
    n_draws: int,
    seed: int,
    block: int = 16,
) -> tuple[list[MeanErrorTensor], np.ndarray]:
    """Mean difference tensors for every class from shared draws.

    Each draw's (t, eps) pair is reused across all classes, so the
    class-to-class differences isolate conditioning effects.  Also
    returns the per-class mean scalar error for picking the predicted
    class.
    """
    if n_draws < 1:
        raise ValueError("need at least one draw")
    arch = model.config
    conds = stack_conditions(
        [
            class_condition(c, num_classes, arch.cond_rows, arch.cond_cols)
            for c in range(num_classes)
        ]
    )
    z0 = codec.encode(image)
    gen = torch.Generator().manual_seed(seed)
    sums = torch.zeros((num_classes, *z0.shape), dtype=torch.float64)
    err_sums = np.zeros(num_classes, dtype=np.float64)

    done = 0
    while done < n_draws:
        n = min(block, n_draws - done)
        ts = torch.randint(1, schedule.T + 1, (n,), generator=gen)
        eps = torch.randn((n, *z0.shape), generator=gen)
        a_bar = torch.tensor(
            schedule.alpha_bar[(ts - 1).numpy()], dtype=z0.dtype
        ).view(n, 1, 1, 1)
        z_t = torch.sqrt(a_bar) * z0 + torch.sqrt(1.0 - a_bar) * eps

        z_rep = z_t.repeat_interleave(num_classes, dim=0)
        eps_rep = eps.repeat_interleave(num_classes, dim=0)
        t_rep = ts.repeat_interleave(num_classes)
        cond_rep = conds.repeat(n, 1, 1)
        with torch.no_grad():
            pred = model(z_rep, t_rep, cond_rep)
        diff = (eps_rep - pred).reshape(n, num_classes, *z0.shape).double()
        sums += diff.sum(dim=0)
        err_sums += (
            diff.reshape(n, num_classes, -1).pow(2).sum(dim=2).sum(dim=0).numpy()
        )
        done += n

    tensors = [
        MeanErrorTensor(
            delta=(sums[c] / n_draws).to(z0.dtype), class_index=c, n_draws=n_draws
        )
        for c in range(num_classes)
    ]
    return tensors, err_sums / n_draws


def mean_error_tensor(
    image: torch.Tensor,
    class_index: int,
    num_classes: int,
    model: torch.nn.Module,
    codec: LatentCodec,
    schedule: NoiseSchedule,
    n_draws: int,
    seed: int,
) -> MeanErrorTensor:
    """Single-class mean difference tensor (same draw stream as the batch form)."""
    tensors, _ = mean_error_tensors(
        image, num_classes, model, codec, schedule, n_draws, seed
    )
    return tensors[class_index]


def delta_adjust(
    deltas: dict[int, torch.Tensor], predicted: int
) -> dict[int, torch.Tensor]:
    """Subtract the predicted class's tensor from every class tensor."""
    if predicted not in deltas:
        raise KeyError(f"predicted class {predicted} missing from deltas")
    base = deltas[predicted]
    return {c: d - base for c, d in deltas.items()}


def heatmap(delta: torch.Tensor, codec: LatentCodec, source_class: int, target_class: int) -> Heatmap:
    """Decode an adjusted tensor into an image-space heatmap (no post-processing)."""
    return Heatmap(
        values=codec.decode(delta),
        source_class=source_class,
        target_class=target_class,
    )


def overlay(
    image: torch.Tensor, h: Heatmap, threshold_quantile: float, alpha: float = 0.6
) -> torch.Tensor:
    """Alpha-blend thresholded heatmap pixels onto the image.

    Pixels whose per-location |heatmap| magnitude exceeds the given
    quantile are blended; signed values map dark-negative /
    light-positive.  Untouched pixels pass through.
    """
    if not 0.0 < threshold_quantile < 1.0:
        raise ValueError("threshold_quantile must be in (0, 1)")
    mag = h.values.abs().mean(dim=0)
    cutoff = float(np.quantile(mag.numpy(), threshold_quantile))
    mask = mag > cutoff
    peak = float(h.values.abs().max())
    if peak == 0.0:
        return image.clone()
    signed = (h.values / peak).clamp(-1.0, 1.0)
    out = image.clone()
    out[:, mask] = (1.0 - alpha) * image[:, mask] + alpha * signed[:, mask]
    return out


def heatmap_grid(
    images: dict[int, torch.Tensor],
    model: torch.nn.Module,
    codec: LatentCodec,
    schedule: NoiseSchedule,
    n_draws: int,
    seed: int,
    out_dir: str | Path | None = None,
) -> torch.Tensor:
    """K x K mosaic: originals on the diagonal, heatmaps off-diagonal.

    Cell (row r, col c) holds the heatmap toward target class r computed
    from the class-c representative image.  Returns the mosaic tensor
    (C, K*H, K*W); writes per-cell files when out_dir is given.
    """
    classes = sorted(images)
    K = len(classes)
    sample = images[classes[0]]
    C, H, W = sample.shape
    mosaic = torch.zeros((C, K * H, K * W), dtype=sample.dtype)

    for col, c_src in enumerate(classes):
        image = images[c_src]
        tensors, mean_errors = mean_error_tensors(
            image, K, model, codec, schedule, n_draws, seed + col
        )
        predicted = int(np.argmin(mean_errors))
        deltas = {t.class_index: t.delta for t in tensors}
        adjusted = delta_adjust(deltas, predicted)
        for row, c_target in enumerate(classes):
            if row == col:
                cell = image
            else:
                hm = heatmap(adjusted[c_target], codec, c_src, c_target)
                peak = float(hm.values.abs().max())
                cell = hm.values / peak if peak > 0 else hm.values
            mosaic[:, row * H : (row + 1) * H, col * W : (col + 1) * W] = cell
            if out_dir is not None:
                from .data import save_image

                out = Path(out_dir)
                out.mkdir(parents=True, exist_ok=True)
                if row == col:
                    save_image(cell, out / f"cell_src{c_src}_original.png")
                else:
                    np.save(
                        out / f"cell_src{c_src}_target{c_target}.npy",
                        hm.values.numpy(),
                    )
                    save_image(cell, out / f"cell_src{c_src}_target{c_target}.png")
    if out_dir is not None:
        from .data import save_image

        save_image(mosaic.clamp(-1, 1), Path(out_dir) / "grid.png")
    return mosaic
