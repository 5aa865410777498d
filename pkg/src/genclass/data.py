"""Dataset manifests, the synthetic toy dataset, augmentation, and splits.

Manifests are JSONL, one record per line:
    {"path": str, "label": str, "split": "train|val|test",
     "annotations": [{"rater_id": str, "label": str,
                      "confidence": "High|Moderate|Low|None"}]}
Image paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .diffusion.conditioning import ConditioningMatrix

CONFIDENCE_LEVELS = ("High", "Moderate", "Low", "None")
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    """Raised for schema violations in manifest files."""


@dataclass(frozen=True)
class Annotation:
    rater_id: str
    label: str
    confidence: str

    def to_dict(self) -> dict:
        return {"rater_id": self.rater_id, "label": self.label, "confidence": self.confidence}


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: str
    split: str
    annotations: tuple[Annotation, ...] = ()

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "label": self.label,
            "split": self.split,
            "annotations": [a.to_dict() for a in self.annotations],
        }


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ManifestRecord, ...]
    class_names: tuple[str, ...]
    root: Path

    def split(self, name: str) -> list[ManifestRecord]:
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def class_index(self, label: str) -> int:
        return self.class_names.index(label)

    def resolve(self, record: ManifestRecord) -> Path:
        return self.root / record.path

    def without_class(self, label: str) -> "DatasetManifest":
        """Drop every record of one class; class_names keep their order."""
        kept = tuple(r for r in self.records if r.label != label)
        names = tuple(n for n in self.class_names if n != label)
        return DatasetManifest(records=kept, class_names=names, root=self.root)


def _parse_record(obj: dict, line_no: int) -> ManifestRecord:
    try:
        path, label, split = obj["path"], obj["label"], obj["split"]
    except KeyError as e:
        raise ManifestError(f"line {line_no}: missing field {e.args[0]!r}")
    if split not in SPLITS:
        raise ManifestError(f"line {line_no}: unknown split {split!r}")
    annotations = []
    for a in obj.get("annotations", []):
        conf = a.get("confidence")
        if conf not in CONFIDENCE_LEVELS:
            raise ManifestError(f"line {line_no}: unknown confidence level {conf!r}")
        annotations.append(
            Annotation(rater_id=a["rater_id"], label=a["label"], confidence=conf)
        )
    return ManifestRecord(
        path=path, label=label, split=split, annotations=tuple(annotations)
    )


def load_manifest(path: str | Path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"line {line_no}: invalid JSON ({e})")
            record = _parse_record(obj, line_no)
            if record.path in seen:
                raise ManifestError(f"line {line_no}: duplicate path {record.path!r}")
            seen.add(record.path)
            records.append(record)
    if not records:
        raise ManifestError(f"{path}: no records")
    root = path.parent
    if check_paths:
        for r in records:
            if not (root / r.path).exists():
                raise ManifestError(f"missing image file {r.path!r}")
    class_names = tuple(sorted({r.label for r in records}))
    return DatasetManifest(records=tuple(records), class_names=class_names, root=root)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in manifest.records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def load_image(path: str | Path) -> torch.Tensor:
    """Load a PNG as a (C, H, W) float tensor in [-1, 1]."""
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(arr * 2.0 - 1.0)


def save_image(tensor: torch.Tensor, path: str | Path) -> None:
    """Save a (C, H, W) tensor in [-1, 1] as a lossless PNG."""
    arr = tensor.detach().cpu().numpy()
    arr = np.clip((arr + 1.0) / 2.0, 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        img = Image.fromarray(arr[0], mode="L")
    else:
        img = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def split_images(
    manifest: DatasetManifest, split: str
) -> tuple[torch.Tensor, np.ndarray, list[ManifestRecord]]:
    """Load one split as (images (N,C,H,W), class indices, records)."""
    records = manifest.split(split)
    images = torch.stack([load_image(manifest.resolve(r)) for r in records])
    labels = np.array([manifest.class_index(r.label) for r in records], dtype=np.int64)
    return images, labels, records


# ---------------------------------------------------------------------------
# Toy dataset
# ---------------------------------------------------------------------------

TOY_CLASS_NAMES = ("speckled", "ring", "striped", "zigzag", "boxy", "dotted")


@dataclass(frozen=True)
class ToyDatasetSpec:
    k: int = 3
    per_class: int = 300
    image_size: int = 32
    channels: int = 1
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)


def _coord_grids(n: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(n, dtype=np.float64)
    return np.meshgrid(idx, idx, indexing="ij")


def _render_toy(class_name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One toy image as float array in [0, 1], shape (size, size)."""
    yy, xx = _coord_grids(size)
    cy = (size - 1) / 2 + rng.uniform(-2, 2)
    cx = (size - 1) / 2 + rng.uniform(-2, 2)
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    img = 0.08 + rng.normal(0.0, 0.02, (size, size))
    scale = size / 32.0

    if class_name == "speckled":
        r = rng.uniform(9, 11.5) * scale
        inside = dist <= r
        img[inside] = 0.8
        granules = inside & (rng.random((size, size)) < 0.3)
        img[granules] = 0.3
    elif class_name == "ring":
        r_out = rng.uniform(10, 12) * scale
        r_in = r_out - rng.uniform(4.0, 5.0) * scale
        band = (dist <= r_out) & (dist >= r_in)
        img[band] = 0.8 + rng.normal(0.0, 0.03, band.sum())
    elif class_name == "striped":
        r = rng.uniform(9, 11.5) * scale
        inside = dist <= r
        period = rng.uniform(3.5, 5.0) * scale
        phase = rng.uniform(0, 2 * math.pi)
        stripes = 0.42 + 0.32 * np.sin(2 * math.pi * yy / period + phase)
        img[inside] = stripes[inside]
    elif class_name == "zigzag":
        # ring-shaped band carrying the speckled class's granule texture;
        # deliberately shares features with both (anomaly stand-in)
        r_out = rng.uniform(8.5, 9.5) * scale
        r_in = r_out - rng.uniform(4.5, 5.5) * scale
        band = (dist <= r_out) & (dist >= r_in)
        img[band] = 0.75
        granules = band & (rng.random((size, size)) < 0.45)
        img[granules] = 0.25
    elif class_name == "boxy":
        h = rng.uniform(5.0, 6.5) * scale
        inside = (np.abs(yy - cy) <= h) & (np.abs(xx - cx) <= h)
        img[inside] = 0.9 + rng.normal(0.0, 0.03, inside.sum())
    elif class_name == "dotted":
        n_dots = rng.integers(4, 6)
        for _ in range(n_dots):
            ang = rng.uniform(0, 2 * math.pi)
            rad = rng.uniform(2, 7) * scale
            dy, dx = cy + rad * math.sin(ang), cx + rad * math.cos(ang)
            dot = np.sqrt((yy - dy) ** 2 + (xx - dx) ** 2) <= 2.8 * scale
            img[dot] = 0.55
    else:
        raise ValueError(f"unknown toy class {class_name!r}")

    return np.clip(img, 0.0, 1.0)


def generate_toy_dataset(spec: ToyDatasetSpec, out_dir: str | Path) -> DatasetManifest:
    """Write PNGs plus a manifest with stratified train/val/test splits."""
    if not 1 <= spec.k <= len(TOY_CLASS_NAMES):
        raise ValueError(f"k must be in [1, {len(TOY_CLASS_NAMES)}]")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    f_train, f_val, _ = spec.split_fractions

    records = []
    for ci in range(spec.k):
        name = TOY_CLASS_NAMES[ci]
        n_train = int(round(spec.per_class * f_train))
        n_val = int(round(spec.per_class * f_val))
        for i in range(spec.per_class):
            arr = _render_toy(name, spec.image_size, rng)
            if spec.channels == 3:
                arr = np.stack([arr] * 3, axis=-1)
            data = np.round(arr * 255.0).astype(np.uint8)
            rel = f"images/{name}_{i:04d}.png"
            Image.fromarray(data).save(out_dir / rel)
            split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
            records.append(ManifestRecord(path=rel, label=name, split=split))

    # sorted, matching load_manifest's derived ordering
    manifest = DatasetManifest(
        records=tuple(records),
        class_names=tuple(sorted(TOY_CLASS_NAMES[: spec.k])),
        root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ColorJitterSpec:
    brightness: float = 0.25
    contrast: float = 0.25
    saturation: float = 0.25
    hue: float = 0.125


@dataclass(frozen=True)
class AugmentationSpec:
    flips: bool = True
    rotation_degrees: float = 360.0
    color_jitter: ColorJitterSpec | None = field(default_factory=ColorJitterSpec)
    mixup_alpha: float = 0.3
    policy_augment: bool = False

    def inference_variant(self) -> "AugmentationSpec":
        """Same transforms minus mixup and the policy stage."""
        return replace(self, mixup_alpha=0.0, policy_augment=False)


def _jitter(image01: torch.Tensor, spec: ColorJitterSpec, rng: np.random.Generator) -> torch.Tensor:
    if spec.brightness > 0:
        image01 = image01 * rng.uniform(1 - spec.brightness, 1 + spec.brightness)
    if spec.contrast > 0:
        f = rng.uniform(1 - spec.contrast, 1 + spec.contrast)
        mean = image01.mean()
        image01 = (image01 - mean) * f + mean
    if image01.shape[0] == 3:
        image01 = image01.clamp(0.0, 1.0)
        if spec.saturation > 0:
            image01 = TF.adjust_saturation(
                image01, rng.uniform(1 - spec.saturation, 1 + spec.saturation)
            )
        if spec.hue > 0:
            image01 = TF.adjust_hue(image01, rng.uniform(-spec.hue, spec.hue))
    return image01.clamp(0.0, 1.0)


def augment(
    image: torch.Tensor,
    condition: "ConditioningMatrix",
    spec: AugmentationSpec,
    rng: np.random.Generator,
    partner: tuple[torch.Tensor, "ConditioningMatrix"] | None = None,
) -> tuple[torch.Tensor, "ConditioningMatrix", float]:
    """Apply geometric and photometric transforms, then conditioning-mixup.

    Flips are diagonal (transpose / anti-transpose), valid for square
    images.  Rotation corners are filled with the image minimum.  When a
    partner is given and mixup is enabled, the images and conditioning
    matrices are blended with the same Beta(alpha, alpha) weight; the
    denoising target is never touched here.
    Returns (image, condition, mix_lambda); mix_lambda is 1.0 when mixup
    did not fire.
    """
    out = image
    if spec.flips:
        if rng.random() < 0.5:
            out = out.transpose(-1, -2)
        if rng.random() < 0.5:
            out = torch.flip(out, dims=(-1, -2)).transpose(-1, -2)
    if spec.rotation_degrees > 0:
        angle = float(rng.uniform(0.0, spec.rotation_degrees))
        out = TF.rotate(
            out,
            angle,
            interpolation=TF.InterpolationMode.BILINEAR,
            fill=[float(out.min())],
        )
    if spec.color_jitter is not None:
        out01 = (out + 1.0) / 2.0
        out = _jitter(out01, spec.color_jitter, rng) * 2.0 - 1.0
    out = out.clamp(-1.0, 1.0)

    lam = 1.0
    if partner is not None and spec.mixup_alpha > 0:
        from .diffusion.conditioning import mix_conditions

        lam = float(rng.beta(spec.mixup_alpha, spec.mixup_alpha))
        p_img, p_cond = partner
        out = lam * out + (1.0 - lam) * p_img
        condition = mix_conditions(condition, p_cond, lam)
    return out, condition, lam


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def subsample_per_class(
    manifest: DatasetManifest, n_per_class: int, seed: int, split: str = "train"
) -> DatasetManifest:
    """Keep exactly n_per_class records of one split per class.

    Records from other splits pass through unchanged.  Sampling is
    uniform without replacement and seed-deterministic.
    """
    rng = np.random.default_rng(seed)
    target = [r for r in manifest.records if r.split == split]
    rest = [r for r in manifest.records if r.split != split]
    kept: list[ManifestRecord] = []
    for name in manifest.class_names:
        pool = [r for r in target if r.label == name]
        if len(pool) < n_per_class:
            raise ValueError(
                f"class {name!r} has only {len(pool)} {split} records, "
                f"need {n_per_class}"
            )
        idx = rng.choice(len(pool), size=n_per_class, replace=False)
        kept.extend(pool[i] for i in sorted(idx))
    order = {r.path: i for i, r in enumerate(manifest.records)}
    combined = sorted(kept + rest, key=lambda r: order[r.path])
    return DatasetManifest(
        records=tuple(combined), class_names=manifest.class_names, root=manifest.root
    )


def kfold_split(
    manifest: DatasetManifest, k: int, seed: int
) -> list[DatasetManifest]:
    """Stratified k-fold reassignment of splits.

    Every record lands in a test fold exactly once; the remaining
    records of each fold are split 80/20 into train/val per class.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(manifest.records):
        raise ValueError(f"k={k} exceeds dataset size {len(manifest.records)}")
    rng = np.random.default_rng(seed)

    by_class: dict[str, list[ManifestRecord]] = {n: [] for n in manifest.class_names}
    for r in manifest.records:
        by_class[r.label].append(r)

    fold_of: dict[str, int] = {}
    for name in manifest.class_names:
        pool = by_class[name]
        perm = rng.permutation(len(pool))
        for j, pi in enumerate(perm):
            fold_of[pool[pi].path] = j % k

    folds = []
    for fold in range(k):
        new_records = []
        for name in manifest.class_names:
            train_pool = [r for r in by_class[name] if fold_of[r.path] != fold]
            n_val = int(round(0.2 * len(train_pool)))
            perm = rng.permutation(len(train_pool))
            val_paths = {train_pool[pi].path for pi in perm[:n_val]}
            for r in by_class[name]:
                if fold_of[r.path] == fold:
                    new_records.append(replace(r, split="test"))
                elif r.path in val_paths:
                    new_records.append(replace(r, split="val"))
                else:
                    new_records.append(replace(r, split="train"))
        order = {r.path: i for i, r in enumerate(manifest.records)}
        new_records.sort(key=lambda r: order[r.path])
        folds.append(
            DatasetManifest(
                records=tuple(new_records),
                class_names=manifest.class_names,
                root=manifest.root,
            )
        )
    return folds
