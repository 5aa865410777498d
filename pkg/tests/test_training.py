import json
import math

import numpy as np
import pytest
import torch

from genclass.data import AugmentationSpec
from genclass.diffusion.checkpoint import load_checkpoint
from genclass.diffusion.denoiser import ConditionedDenoiser, DenoiserConfig
from genclass.diffusion.schedule import build_schedule
from genclass.diffusion.training import TrainConfig, TrainingDiverged, train


def _tiny_setup(n=12, size=8, seed=0):
    torch.manual_seed(seed)
    arch = DenoiserConfig(channels=1, image_size=size, base_channels=8,
                          channel_mults=(1, 2), cond_rows=4, cond_cols=4, emb_dim=32)
    model = ConditionedDenoiser(arch)
    schedule = build_schedule(20, "linear_beta", beta_start=0.01, beta_end=0.2)
    gen = torch.Generator().manual_seed(seed + 1)
    images = torch.rand((n, 1, size, size), generator=gen) * 2 - 1
    labels = np.arange(n) % 2
    return model, schedule, images, labels


def _fast_config(steps, **kw):
    kw.setdefault("batch_size", 6)
    kw.setdefault("warmup_steps", 5)
    kw.setdefault("val_interval", 10)
    kw.setdefault("log_interval", 5)
    kw.setdefault("augmentation", AugmentationSpec(
        flips=False, rotation_degrees=0.0, color_jitter=None, mixup_alpha=0.0))
    return TrainConfig(steps=steps, **kw)


def test_zero_steps_checkpoint_equals_initialization(tmp_path):
    model, schedule, images, labels = _tiny_setup()
    init_state = {k: v.clone() for k, v in model.state_dict().items()}
    ckpt = train(model, schedule, images, labels, ["a", "b"],
                 _fast_config(0), tmp_path / "c.bin")
    for k, v in init_state.items():
        assert torch.equal(ckpt.state[k], v)
        assert torch.equal(ckpt.ema_state[k], v.float())


def test_ema_decay_zero_equals_current(tmp_path):
    model, schedule, images, labels = _tiny_setup()
    ckpt = train(model, schedule, images, labels, ["a", "b"],
                 _fast_config(8, ema_decay=0.0), tmp_path / "c.bin")
    for k in ckpt.state:
        assert torch.allclose(ckpt.ema_state[k], ckpt.state[k].float())


def test_overfit_small_dataset_halves_loss(tmp_path):
    model, schedule, images, labels = _tiny_setup(n=10)
    log = tmp_path / "log.jsonl"
    train(model, schedule, images, labels, ["a", "b"],
          _fast_config(300, lr=2e-3), tmp_path / "c.bin",
          val_images=images, val_labels=labels, log_path=log)
    rows = [json.loads(l) for l in log.read_text().splitlines()]
    first, last = rows[0]["loss"], rows[-1]["loss"]
    assert last <= 0.5 * first
    assert any(r["val_loss"] is not None for r in rows)


def test_divergence_aborts_with_diagnostic(tmp_path):
    model, schedule, images, labels = _tiny_setup()
    images[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingDiverged, match="step"):
        train(model, schedule, images, labels, ["a", "b"],
              _fast_config(50), tmp_path / "c.bin")


def test_checkpoint_contains_metadata_and_schedule(tmp_path):
    model, schedule, images, labels = _tiny_setup()
    train(model, schedule, images, labels, ["a", "b"],
          _fast_config(4), tmp_path / "c.bin")
    loaded = load_checkpoint(tmp_path / "c.bin")
    assert loaded.step == 4
    assert loaded.class_names == ["a", "b"]
    assert loaded.schedule.T == schedule.T
    assert loaded.metadata["train_config"]["steps"] == 4


def test_training_is_deterministic(tmp_path):
    outs = []
    for rep in range(2):
        model, schedule, images, labels = _tiny_setup(seed=5)
        ckpt = train(model, schedule, images, labels, ["a", "b"],
                     _fast_config(12, seed=3), tmp_path / f"c{rep}.bin")
        outs.append(ckpt)
    for k in outs[0].state:
        assert torch.equal(outs[0].state[k], outs[1].state[k])
    a = (tmp_path / "c0.bin").read_bytes()
    b = (tmp_path / "c1.bin").read_bytes()
    assert a == b


def test_mixup_never_blends_noise_targets(tmp_path, monkeypatch):
    """Conditioning mixup changes images and conditions only; the loss
    target stays the per-item drawn noise."""
    import genclass.diffusion.training as training_mod

    seen = {}
    real_loss = training_mod.training_loss

    def spy(z0, cond, model, schedule, generator):
        seen["cond"] = cond.clone()
        return real_loss(z0, cond, model, schedule, generator)

    monkeypatch.setattr(training_mod, "training_loss", spy)
    model, schedule, images, labels = _tiny_setup()
    cfg = TrainConfig(steps=1, batch_size=8, warmup_steps=1,
                      augmentation=AugmentationSpec(
                          flips=False, rotation_degrees=0.0, color_jitter=None,
                          mixup_alpha=0.3))
    train(model, schedule, images, labels, ["a", "b"], cfg, tmp_path / "c.bin")
    cond = seen["cond"]
    # mixed rows stay convex combinations of one-hots
    sums = cond.sum(dim=2)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)
