"""Metrics and experiment runners.

Covers accuracy/balanced accuracy, ROC/AUC with KDE curves for anomaly
detection, realness-test statistics, majority voting, the pairwise
labeller-confidence matrix, and the experiment dispatcher (in-domain,
anomaly, efficiency, domain-shift).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .classifier import ClassifierConfig, classify
from .data import (
    DatasetManifest,
    load_manifest,
    split_images,
    subsample_per_class,
)
from .diffusion.checkpoint import Checkpoint, load_checkpoint
from .diffusion.codec import IdentityCodec
from .psychometric import model_confidence

CONFIDENCE_ORDER = ("High", "Moderate", "Low", "None")


# ---------------------------------------------------------------------------
# Classification metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    accuracy: float
    balanced_accuracy: float
    per_class_recall: list[float]
    confusion: np.ndarray  # (K, K) counts, rows = true class

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "per_class_recall": self.per_class_recall,
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    mat = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(labels, preds):
        mat[t, p] += 1
    return mat


def balanced_accuracy(preds, labels, num_classes: int) -> float:
    """Unweighted mean of per-class recall; empty classes are skipped."""
    mat = confusion_matrix(preds, labels, num_classes)
    support = mat.sum(axis=1)
    recalls = []
    for c in range(num_classes):
        if support[c] == 0:
            warnings.warn(f"class {c} has no support; excluded from balanced accuracy")
            continue
        recalls.append(mat[c, c] / support[c])
    if not recalls:
        raise ValueError("no class has support")
    return float(np.mean(recalls))


def metrics_report(preds, labels, num_classes: int) -> MetricsReport:
    mat = confusion_matrix(preds, labels, num_classes)
    support = mat.sum(axis=1)
    recalls = [
        float(mat[c, c] / support[c]) if support[c] > 0 else float("nan")
        for c in range(num_classes)
    ]
    acc = float(np.trace(mat) / mat.sum())
    bal = balanced_accuracy(preds, labels, num_classes)
    return MetricsReport(
        accuracy=acc, balanced_accuracy=bal, per_class_recall=recalls, confusion=mat
    )


# ---------------------------------------------------------------------------
# ROC / AUC / KDE
# ---------------------------------------------------------------------------


@dataclass
class AnomalyReport:
    auc: float
    roc: list[tuple[float, float]]  # (fpr, tpr), (0,0) .. (1,1)
    kde_normal: tuple[np.ndarray, np.ndarray]
    kde_abnormal: tuple[np.ndarray, np.ndarray]
    baseline_auc: float | None = None

    def to_dict(self) -> dict:
        d = {
            "auc": self.auc,
            "roc": [[float(a), float(b)] for a, b in self.roc],
            "kde_normal": [self.kde_normal[0].tolist(), self.kde_normal[1].tolist()],
            "kde_abnormal": [
                self.kde_abnormal[0].tolist(),
                self.kde_abnormal[1].tolist(),
            ],
        }
        if self.baseline_auc is not None:
            d["baseline_auc"] = self.baseline_auc
        return d


def auc_score(scores_pos, scores_neg) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(tie), via average ranks."""
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("both score lists must be non-empty")
    ranks = rankdata(np.concatenate([pos, neg]))
    r_pos = ranks[: len(pos)].sum()
    count = r_pos - len(pos) * (len(pos) + 1) / 2
    return float(count / (len(pos) * len(neg)))


def roc_points(scores_pos, scores_neg) -> list[tuple[float, float]]:
    """Threshold-sweep ROC from (0,0) to (1,1), non-decreasing in both axes."""
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    points = [(0.0, 0.0)]
    for th in thresholds:
        tpr = float((pos >= th).mean())
        fpr = float((neg >= th).mean())
        points.append((fpr, tpr))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return points


def silverman_bandwidth(values: np.ndarray) -> float:
    n = len(values)
    sd = values.std(ddof=1) if n > 1 else 0.0
    q75, q25 = np.percentile(values, [75, 25])
    iqr = q75 - q25
    scale = min(sd, iqr / 1.34) if iqr > 0 else sd
    if scale <= 0:
        scale = max(abs(float(values.mean())), 1.0) * 1e-3
    return 0.9 * scale * n ** (-0.2)


def kde_curve(values, n_points: int = 201) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian KDE with Silverman bandwidth, evaluated over the support."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise ValueError("empty sample")
    h = silverman_bandwidth(values)
    xs = np.linspace(values.min() - 5 * h, values.max() + 5 * h, n_points)
    z = (xs[:, None] - values[None, :]) / h
    ys = np.exp(-0.5 * z**2).sum(axis=1) / (len(values) * h * math.sqrt(2 * math.pi))
    return xs, ys


def roc_auc(scores_pos, scores_neg) -> AnomalyReport:
    """Full anomaly report; positives are the normal (higher-score) group."""
    return AnomalyReport(
        auc=auc_score(scores_pos, scores_neg),
        roc=roc_points(scores_pos, scores_neg),
        kde_normal=kde_curve(scores_pos),
        kde_abnormal=kde_curve(scores_neg),
    )


# ---------------------------------------------------------------------------
# Human-study metrics
# ---------------------------------------------------------------------------


def wilson_interval(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValueError("n must be positive")
    from scipy.stats import norm

    z = norm.ppf(0.5 + level / 2)
    phat = k / n
    denom = 1 + z**2 / n
    center = (phat + z**2 / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z**2 / (4 * n**2)) / denom
    return center - half, center + half


@dataclass
class TuringReport:
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    ci95: tuple[float, float]
    agreement_rate: float | None
    n_assessments: int
    per_rater: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "ci95": list(self.ci95),
            "agreement_rate": self.agreement_rate,
            "n_assessments": self.n_assessments,
            "per_rater": self.per_rater,
        }


def _realness_rates(judgments: list[dict]) -> dict:
    real = [j for j in judgments if j["truth_is_real"]]
    synth = [j for j in judgments if not j["truth_is_real"]]
    correct = sum(
        1 for j in judgments if bool(j["guessed_real"]) == bool(j["truth_is_real"])
    )
    n = len(judgments)
    sens = (
        sum(1 for j in real if j["guessed_real"]) / len(real) if real else None
    )
    spec = (
        sum(1 for j in synth if not j["guessed_real"]) / len(synth) if synth else None
    )
    agree_pool = [j for j in synth if j.get("intended_class") is not None]
    agreement = (
        sum(1 for j in agree_pool if j.get("guessed_class") == j["intended_class"])
        / len(agree_pool)
        if agree_pool
        else None
    )
    return {
        "accuracy": correct / n,
        "sensitivity": sens,
        "specificity": spec,
        "agreement_rate": agreement,
        "n_correct": correct,
        "n": n,
    }


def turing_metrics(judgments: list[dict]) -> TuringReport:
    """Realness-test statistics from judgment rows.

    Each row needs truth_is_real and guessed_real; intended_class /
    guessed_class feed the agreement rate; rater_id (optional) feeds the
    per-rater breakdown.  Sensitivity is P(guess real | real) and
    specificity P(guess synthetic | synthetic).
    """
    if not judgments:
        raise ValueError("no judgments")
    for j in judgments:
        if j.get("truth_is_real") is None:
            raise ValueError(f"judgment for {j.get('item_id')} is missing truth label")
    rates = _realness_rates(judgments)
    per_rater = {}
    raters = sorted({j["rater_id"] for j in judgments if j.get("rater_id") is not None})
    for r in raters:
        rows = [j for j in judgments if j.get("rater_id") == r]
        sub = _realness_rates(rows)
        sub.pop("n_correct")
        per_rater[r] = sub
    return TuringReport(
        accuracy=rates["accuracy"],
        sensitivity=rates["sensitivity"],
        specificity=rates["specificity"],
        ci95=wilson_interval(rates["n_correct"], rates["n"]),
        agreement_rate=rates["agreement_rate"],
        n_assessments=rates["n"],
        per_rater=per_rater,
    )


def majority_vote(labels: list[str], seniority: list[float]) -> str:
    """Modal label; ties go to the most-senior rater among the tied labels."""
    if not labels:
        raise ValueError("no labels")
    if len(labels) != len(seniority):
        raise ValueError("labels and seniority differ in length")
    counts: dict[str, int] = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    top = max(counts.values())
    tied = {lab for lab, c in counts.items() if c == top}
    if len(tied) == 1:
        return next(iter(tied))
    best_rater = max(
        (s, i) for i, s in enumerate(seniority) if labels[i] in tied
    )
    return labels[best_rater[1]]


def confidence_confusion_matrix(pairwise: list[tuple[str, str]]) -> np.ndarray:
    """4x4 counts of unordered confidence-level pairs.

    Each pair is counted once in the (min, max)-ordered cell, with
    levels ordered High, Moderate, Low, None; the matrix total equals
    the number of pairs.  Use mirror_confusion for symmetric display.
    """
    idx = {lvl: i for i, lvl in enumerate(CONFIDENCE_ORDER)}
    mat = np.zeros((4, 4), dtype=np.int64)
    for a, b in pairwise:
        if a not in idx or b not in idx:
            raise ValueError(f"unknown confidence level in pair ({a!r}, {b!r})")
        i, j = sorted((idx[a], idx[b]))
        mat[i, j] += 1
    return mat


def mirror_confusion(mat: np.ndarray) -> np.ndarray:
    """Symmetric display copy of a canonical pair-count matrix."""
    return mat + np.triu(mat, k=1).T


# ---------------------------------------------------------------------------
# Classification over manifests
# ---------------------------------------------------------------------------


def classify_manifest(
    ckpt: Checkpoint,
    manifest: DatasetManifest,
    split: str,
    cfg: ClassifierConfig,
    use_ema: bool = True,
) -> list[dict]:
    """Classify every record of one split; per-item seeds derive from cfg.seed."""
    from dataclasses import replace as dc_replace

    model = ckpt.build_model(use_ema=use_ema)
    codec = IdentityCodec()
    records = manifest.split(split)
    rows = []
    for i, rec in enumerate(records):
        image = _load_record_image(manifest, rec)
        item_cfg = dc_replace(cfg, seed=cfg.seed + i)
        result = classify(
            image, model, codec, ckpt.schedule, ckpt.num_classes, item_cfg
        )
        row = {"path": rec.path, "label": rec.label}
        row.update(result.to_dict())
        row["predicted_label"] = ckpt.class_names[result.predicted_class]
        rows.append(row)
    return rows


def _load_record_image(manifest: DatasetManifest, rec) -> torch.Tensor:
    from .data import load_image

    return load_image(manifest.resolve(rec))


def nearest_class_pixel_confidence(
    centroids: dict[str, np.ndarray], image: np.ndarray
) -> float:
    """Trivial anomaly baseline: negated distance to the nearest class centroid."""
    dists = [np.linalg.norm(image - c) for c in centroids.values()]
    return -float(min(dists))


def class_centroids(
    manifest: DatasetManifest, split: str = "train"
) -> dict[str, np.ndarray]:
    images, labels, _ = split_images(manifest, split)
    arr = images.numpy()
    return {
        name: arr[labels == i].mean(axis=0)
        for i, name in enumerate(manifest.class_names)
    }


# ---------------------------------------------------------------------------
# Experiment runner
# ---------------------------------------------------------------------------


@dataclass
class ExperimentSpec:
    kind: str
    output_dir: str
    train_manifest: str | None = None
    test_manifest: str | None = None
    checkpoint: str | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    n_per_class: list[int] = field(default_factory=list)
    held_out_class: str | None = None
    train: dict = field(default_factory=dict)
    classifier: dict = field(default_factory=dict)

    VALID_KINDS = ("in_domain", "anomaly", "efficiency", "domain_shift")

    def __post_init__(self):
        if self.kind not in self.VALID_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentSpec":
        with open(path) as f:
            data = json.load(f)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown experiment spec keys: {sorted(unknown)}")
        return cls(**data)


def _classifier_config(classifier: dict, seed: int) -> ClassifierConfig:
    from .classifier import WeightingStrategy

    kwargs = dict(classifier)
    if "weighting" in kwargs and isinstance(kwargs["weighting"], str):
        kwargs["weighting"] = WeightingStrategy(kwargs["weighting"])
    kwargs.setdefault("seed", seed)
    return ClassifierConfig(**kwargs)


def _checkpoint_cache_path(manifest_path: Path, train: dict, seed: int) -> Path | None:
    cache_dir = os.environ.get("GENCLASS_CACHE")
    if not cache_dir:
        return None
    digest = hashlib.sha256()
    digest.update(Path(manifest_path).read_bytes())
    digest.update(json.dumps(train, sort_keys=True).encode())
    digest.update(str(seed).encode())
    return Path(cache_dir) / f"ckpt_{digest.hexdigest()[:24]}.bin"


def train_for_experiment(
    manifest: DatasetManifest,
    manifest_path: Path,
    train: dict,
    seed: int,
    out_path: Path,
) -> Checkpoint:
    """Train (or fetch from GENCLASS_CACHE) a model for an experiment run."""
    from .runconfig import train_from_manifest

    cached = _checkpoint_cache_path(manifest_path, train, seed)
    if cached is not None and cached.exists():
        return load_checkpoint(cached)
    ckpt = train_from_manifest(manifest, dict(train), seed, out_path)
    if cached is not None:
        cached.parent.mkdir(parents=True, exist_ok=True)
        from .diffusion.checkpoint import save_checkpoint

        save_checkpoint(ckpt, cached)
    return ckpt


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def run_experiment(spec: ExperimentSpec) -> dict:
    """Dispatch one experiment and write report.json plus curve rows."""
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    if spec.kind == "in_domain":
        report = _run_in_domain(spec, out)
    elif spec.kind == "anomaly":
        report = _run_anomaly(spec, out)
    elif spec.kind == "efficiency":
        report = _run_efficiency(spec, out)
    else:
        report = _run_domain_shift(spec, out)

    _write_json(out / "report.json", report)
    return report


def _load_or_train(spec: ExperimentSpec, manifest, manifest_path, seed, out) -> Checkpoint:
    if spec.checkpoint:
        return load_checkpoint(spec.checkpoint)
    return train_for_experiment(
        manifest, manifest_path, spec.train, seed, out / f"model_seed{seed}.bin"
    )


def _eval_split(ckpt, manifest, spec: ExperimentSpec, seed: int, split="test"):
    cfg = _classifier_config(spec.classifier, seed)
    rows = classify_manifest(ckpt, manifest, split, cfg)
    labels = [ckpt.class_names.index(r["label"]) for r in rows]
    preds = [r["predicted"] for r in rows]
    return rows, metrics_report(preds, labels, ckpt.num_classes)


def _run_in_domain(spec: ExperimentSpec, out: Path) -> dict:
    manifest = load_manifest(spec.train_manifest)
    ckpt = _load_or_train(spec, manifest, Path(spec.train_manifest), spec.seeds[0], out)
    rows, report = _eval_split(ckpt, manifest, spec, spec.seeds[0])
    _write_jsonl(out / "results.jsonl", rows)
    return {"kind": "in_domain", "metrics": report.to_dict()}


def _run_domain_shift(spec: ExperimentSpec, out: Path) -> dict:
    train_manifest = load_manifest(spec.train_manifest)
    test_manifest = load_manifest(spec.test_manifest)
    ckpt = _load_or_train(
        spec, train_manifest, Path(spec.train_manifest), spec.seeds[0], out
    )
    missing = set(test_manifest.class_names) - set(ckpt.class_names)
    if missing:
        raise ValueError(f"test classes unknown to the model: {sorted(missing)}")
    rows = classify_manifest(
        ckpt, test_manifest, "test", _classifier_config(spec.classifier, spec.seeds[0])
    )
    labels = [ckpt.class_names.index(r["label"]) for r in rows]
    preds = [r["predicted"] for r in rows]
    report = metrics_report(preds, labels, ckpt.num_classes)
    _write_jsonl(out / "results.jsonl", rows)
    return {"kind": "domain_shift", "metrics": report.to_dict()}


# Anomaly scoring needs confidences comparable across items: a fixed draw
# budget with no pruning, on the scale-free per-draw normalization.
ANOMALY_CLASSIFIER_DEFAULTS = {
    "weighting": "normalized_per_draw",
    "prune": False,
    "min_iters": 20,
    "max_iters": 120,
}


def _run_anomaly(spec: ExperimentSpec, out: Path) -> dict:
    if not spec.held_out_class:
        raise ValueError("anomaly experiment needs held_out_class")
    train_manifest = load_manifest(spec.train_manifest)
    test_manifest = load_manifest(spec.test_manifest or spec.train_manifest)
    if any(
        r.label == spec.held_out_class and r.split == "train"
        for r in train_manifest.records
    ):
        raise ValueError(
            f"held-out class {spec.held_out_class!r} leaked into the training manifest"
        )
    fit_manifest = train_manifest.without_class(spec.held_out_class)
    ckpt = _load_or_train(spec, fit_manifest, Path(spec.train_manifest), spec.seeds[0], out)

    merged = dict(ANOMALY_CLASSIFIER_DEFAULTS)
    merged.update(spec.classifier)
    cfg = _classifier_config(merged, spec.seeds[0])
    rows = classify_manifest(ckpt, test_manifest, "test", cfg)
    confidences = np.array([r["confidence_raw"] for r in rows])
    peak = confidences.max()
    norm = confidences / peak if peak > 0 else confidences
    is_normal = np.array([r["label"] != spec.held_out_class for r in rows])
    if is_normal.all() or not is_normal.any():
        raise ValueError("test split needs both normal and held-out items")

    report = roc_auc(norm[is_normal], norm[~is_normal])

    centroids = class_centroids(fit_manifest, "train")
    test_images, _, test_records = split_images(test_manifest, "test")
    base_scores = np.array(
        [
            nearest_class_pixel_confidence(centroids, img)
            for img in test_images.numpy()
        ]
    )
    report.baseline_auc = auc_score(base_scores[is_normal], base_scores[~is_normal])

    for i, row in enumerate(rows):
        row["confidence_normalized"] = float(norm[i])
        row["is_normal"] = bool(is_normal[i])
    _write_jsonl(out / "results.jsonl", rows)
    curves = [
        {"x": float(x), "y": float(y), "series": "kde_normal"}
        for x, y in zip(*report.kde_normal)
    ] + [
        {"x": float(x), "y": float(y), "series": "kde_abnormal"}
        for x, y in zip(*report.kde_abnormal)
    ]
    _write_jsonl(out / "curves.jsonl", curves)
    return {"kind": "anomaly", "held_out_class": spec.held_out_class, **report.to_dict()}


def _run_efficiency(spec: ExperimentSpec, out: Path) -> dict:
    if not spec.n_per_class:
        raise ValueError("efficiency experiment needs n_per_class")
    manifest = load_manifest(spec.train_manifest)
    results: dict[int, list[float]] = {}
    for n in spec.n_per_class:
        results[n] = []
        for seed in spec.seeds:
            sub = subsample_per_class(manifest, n, seed)
            sub_path = out / f"manifest_n{n}_seed{seed}.jsonl"
            from .data import save_manifest

            save_manifest(sub, sub_path)
            ckpt = train_for_experiment(
                sub, sub_path, spec.train, seed, out / f"model_n{n}_seed{seed}.bin"
            )
            _, report = _eval_split(ckpt, sub, spec, seed)
            results[n].append(report.balanced_accuracy)
    summary = {
        str(n): {"mean": float(np.mean(v)), "std": float(np.std(v)), "runs": v}
        for n, v in results.items()
    }
    curves = [
        {"x": n, "y": float(np.mean(v)), "series": "balanced_accuracy_mean"}
        for n, v in results.items()
    ]
    _write_jsonl(out / "curves.jsonl", curves)
    return {"kind": "efficiency", "per_n": summary}
