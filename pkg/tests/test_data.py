import json

import numpy as np
import pytest
import torch

from genclass.data import (
    AugmentationSpec,
    ColorJitterSpec,
    ManifestError,
    ToyDatasetSpec,
    augment,
    generate_toy_dataset,
    kfold_split,
    load_image,
    load_manifest,
    save_image,
    save_manifest,
    split_images,
    subsample_per_class,
)
from genclass.diffusion.conditioning import class_condition


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    manifest = generate_toy_dataset(ToyDatasetSpec(k=3, per_class=20, seed=3), out)
    return manifest


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def test_empty_manifest_rejected(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("")
    with pytest.raises(ManifestError, match="no records"):
        load_manifest(p)


def test_unknown_split_rejected(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps({"path": "a.png", "label": "x", "split": "holdout"}))
    with pytest.raises(ManifestError, match="line 1"):
        load_manifest(p)


def test_unknown_confidence_rejected(tmp_path):
    p = tmp_path / "m.jsonl"
    rec = {"path": "a.png", "label": "x", "split": "train",
           "annotations": [{"rater_id": "r", "label": "x", "confidence": "Maybe"}]}
    p.write_text(json.dumps(rec))
    with pytest.raises(ManifestError, match="confidence"):
        load_manifest(p)


def test_duplicate_path_rejected(tmp_path):
    p = tmp_path / "m.jsonl"
    rec = {"path": "a.png", "label": "x", "split": "train"}
    p.write_text(json.dumps(rec) + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(p)


def test_missing_file_rejected(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps({"path": "nope.png", "label": "x", "split": "train"}))
    with pytest.raises(ManifestError, match="missing image"):
        load_manifest(p)


def test_round_trip_identity(toy, tmp_path):
    out = tmp_path / "copy.jsonl"
    save_manifest(toy, out)
    first = (toy.root / "manifest.jsonl").read_text()
    assert out.read_text() == first
    reloaded = load_manifest(toy.root / "manifest.jsonl")
    assert reloaded.class_names == toy.class_names
    assert [r.to_dict() for r in reloaded.records] == [r.to_dict() for r in toy.records]


def test_without_class(toy):
    reduced = toy.without_class("ring")
    assert "ring" not in reduced.class_names
    assert all(r.label != "ring" for r in reduced.records)
    assert len(reduced.records) == 40


# ---------------------------------------------------------------------------
# Toy dataset
# ---------------------------------------------------------------------------


def test_toy_deterministic(tmp_path):
    spec = ToyDatasetSpec(k=2, per_class=5, seed=9)
    m1 = generate_toy_dataset(spec, tmp_path / "a")
    m2 = generate_toy_dataset(spec, tmp_path / "b")
    for r1, r2 in zip(m1.records, m2.records):
        b1 = (m1.root / r1.path).read_bytes()
        b2 = (m2.root / r2.path).read_bytes()
        assert b1 == b2


def test_toy_counts(tmp_path):
    m = generate_toy_dataset(ToyDatasetSpec(k=3, per_class=30, seed=0), tmp_path)
    assert len(m.records) == 90
    for name in m.class_names:
        assert sum(1 for r in m.records if r.label == name) == 30
    splits = {s: sum(1 for r in m.records if r.split == s) for s in ("train", "val", "test")}
    assert splits == {"train": 63, "val": 9, "test": 18}


def test_toy_separability_oracle(tmp_path):
    m = generate_toy_dataset(ToyDatasetSpec(k=4, per_class=200, seed=11), tmp_path)
    train, trl, _ = split_images(m, "train")
    test, tel, _ = split_images(m, "test")
    cents = {c: train.numpy()[trl == c].mean(axis=0) for c in range(4)}
    preds = np.array([
        min(cents, key=lambda c: np.linalg.norm(img - cents[c]))
        for img in test.numpy()
    ])
    assert (preds == tel).mean() >= 0.99


def test_image_round_trip(tmp_path):
    img = torch.rand(1, 16, 16) * 2 - 1
    save_image(img, tmp_path / "x.png")
    back = load_image(tmp_path / "x.png")
    assert back.shape == (1, 16, 16)
    assert torch.allclose(back, img, atol=1.0 / 255.0)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def _an_image(seed=0, channels=1):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand((channels, 16, 16), generator=g) * 2 - 1)


def test_augment_preserves_shape_and_range():
    spec = AugmentationSpec()
    rng = np.random.default_rng(0)
    cond = class_condition(0, 3)
    for _ in range(25):
        out, _, _ = augment(_an_image(), cond, spec, rng)
        assert out.shape == (1, 16, 16)
        assert out.min() >= -1.0 and out.max() <= 1.0


def test_augment_rgb_jitter_path():
    spec = AugmentationSpec(color_jitter=ColorJitterSpec())
    rng = np.random.default_rng(1)
    out, _, _ = augment(_an_image(channels=3), class_condition(0, 3), spec, rng)
    assert out.shape == (3, 16, 16)


class _FixedBetaRng:
    """Duck-typed generator forcing a specific mixup weight."""

    def __init__(self, lam):
        self.lam = lam

    def random(self):
        return 0.9  # no flips

    def uniform(self, lo, hi):
        return lo

    def beta(self, a, b):
        return self.lam


def test_mixup_identity_when_lambda_one():
    spec = AugmentationSpec(flips=False, rotation_degrees=0.0, color_jitter=None,
                            mixup_alpha=0.3)
    img, partner = _an_image(1), _an_image(2)
    cond_a, cond_b = class_condition(0, 3), class_condition(1, 3)
    out, cond, lam = augment(img, cond_a, spec, _FixedBetaRng(1.0),
                             partner=(partner, cond_b))
    assert lam == 1.0
    assert torch.equal(out, img)
    assert torch.equal(cond.matrix, cond_a.matrix)


def test_mixup_rows_convex():
    spec = AugmentationSpec(flips=False, rotation_degrees=0.0, color_jitter=None,
                            mixup_alpha=0.3)
    rng = np.random.default_rng(3)
    out, cond, lam = augment(
        _an_image(1), class_condition(0, 3), spec, rng,
        partner=(_an_image(2), class_condition(2, 3)),
    )
    for row in cond.matrix:
        nz = row[row != 0]
        assert float(nz.sum()) == pytest.approx(1.0, abs=1e-6)


def test_mixup_lambda_distribution():
    spec = AugmentationSpec(flips=False, rotation_degrees=0.0, color_jitter=None,
                            mixup_alpha=0.3)
    rng = np.random.default_rng(4)
    img, partner = _an_image(1), _an_image(2)
    ca, cb = class_condition(0, 2), class_condition(1, 2)
    n = 100_000
    lams = np.array([
        augment(img, ca, spec, rng, partner=(partner, cb))[2] for _ in range(n)
    ])
    # Beta(0.3, 0.3): mean 0.5, var = ab/((a+b)^2 (a+b+1)) = 0.15625
    sem = np.sqrt(0.15625 / n)
    assert abs(lams.mean() - 0.5) < 3 * sem


def test_inference_variant_strips_mixup_and_policy():
    spec = AugmentationSpec(mixup_alpha=0.3, policy_augment=True)
    inf = spec.inference_variant()
    assert inf.mixup_alpha == 0.0 and not inf.policy_augment
    assert inf.flips == spec.flips and inf.rotation_degrees == spec.rotation_degrees


# ---------------------------------------------------------------------------
# Subsampling and folds
# ---------------------------------------------------------------------------


def test_subsample_identity_at_full_support(toy):
    n_train = sum(1 for r in toy.records if r.split == "train" and r.label == "ring")
    sub = subsample_per_class(toy, n_train, seed=0)
    assert {r.path for r in sub.records} == {r.path for r in toy.records}


def test_subsample_deterministic(toy):
    a = subsample_per_class(toy, 5, seed=3)
    b = subsample_per_class(toy, 5, seed=3)
    assert [r.path for r in a.records] == [r.path for r in b.records]


def test_subsample_counts(toy):
    sub = subsample_per_class(toy, 5, seed=1)
    for name in toy.class_names:
        n = sum(1 for r in sub.records if r.split == "train" and r.label == name)
        assert n == 5


def test_subsample_insufficient_names_class(toy):
    with pytest.raises(ValueError, match="ring"):
        subsample_per_class(toy, 1000, seed=0)


def test_subsample_overlap_hypergeometric(tmp_path):
    records = [{"path": f"img{i}.png", "label": "only", "split": "train"}
               for i in range(1000)]
    p = tmp_path / "m.jsonl"
    p.write_text("\n".join(json.dumps(r) for r in records))
    m = load_manifest(p, check_paths=False)
    n = 200
    a = {r.path for r in subsample_per_class(m, n, seed=1).records}
    b = {r.path for r in subsample_per_class(m, n, seed=2).records}
    overlap = len(a & b)
    # hypergeometric: mean n^2/N, sd ~ 5.06
    mean = n * n / 1000
    sd = np.sqrt(n * (n / 1000) * (1 - n / 1000) * (1000 - n) / 999)
    assert abs(overlap - mean) <= 3 * sd


def test_kfold_partition(toy):
    folds = kfold_split(toy, 4, seed=0)
    assert len(folds) == 4
    all_test = []
    for fold in folds:
        test_paths = [r.path for r in fold.records if r.split == "test"]
        all_test.extend(test_paths)
        assert len(test_paths) == 15  # 60 records / 4
    assert len(all_test) == len(toy.records)
    assert len(set(all_test)) == len(toy.records)


def test_kfold_stratified(toy):
    folds = kfold_split(toy, 4, seed=1)
    for fold in folds:
        for name in toy.class_names:
            n = sum(1 for r in fold.records if r.split == "test" and r.label == name)
            assert abs(n - 5) <= 1


def test_kfold_train_val_ratio(toy):
    folds = kfold_split(toy, 4, seed=2)
    fold = folds[0]
    n_train = sum(1 for r in fold.records if r.split == "train")
    n_val = sum(1 for r in fold.records if r.split == "val")
    assert n_val / (n_train + n_val) == pytest.approx(0.2, abs=0.05)


def test_kfold_validates():
    with pytest.raises(ValueError):
        kfold_split(None, 1, 0)
