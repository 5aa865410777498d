"""Command-line entry point wiring all modules.

Every run writes a frozen copy of its resolved configuration alongside
its outputs, keeps all randomness derived from --seed, and reports
failures as machine-readable JSON on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch


def _write_frozen_config(out_dir: Path, subcommand: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"subcommand": subcommand, "config": resolved}
    with open(out_dir / "run_config.json", "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def _dump_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def _dump_jsonl(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def cmd_gen_toy(args) -> int:
    from .data import ToyDatasetSpec, generate_toy_dataset

    spec = ToyDatasetSpec(
        k=args.k,
        per_class=args.n,
        image_size=args.size,
        channels=args.channels,
        seed=args.seed,
    )
    out = Path(args.out)
    generate_toy_dataset(spec, out)
    _write_frozen_config(
        out,
        "gen-toy",
        {
            "k": args.k,
            "n": args.n,
            "size": args.size,
            "channels": args.channels,
            "seed": args.seed,
        },
    )
    print(f"wrote {args.k * args.n} images and manifest to {out}")
    return 0


def cmd_train(args) -> int:
    from .data import load_manifest
    from .runconfig import parse_train_config, resolve_train_config, train_from_manifest

    overrides = parse_train_config(args.config) if args.config else {}
    for item in args.set or []:
        key, _, raw = item.partition("=")
        if not raw:
            raise ValueError(f"--set expects key=value, got {item!r}")
        from .runconfig import _coerce

        overrides[key] = _coerce(key, raw)
    resolved = resolve_train_config(overrides)
    if args.seed is not None:
        resolved["seed"] = args.seed

    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_frozen_config(
        out,
        "train",
        {**{k: list(v) if isinstance(v, tuple) else v for k, v in resolved.items()},
         "manifest": str(args.manifest)},
    )
    ckpt = train_from_manifest(
        manifest,
        resolved,
        None,
        out / "checkpoint.bin",
        log_path=out / "train_log.jsonl",
    )
    print(f"trained {ckpt.step} steps; checkpoint at {out / 'checkpoint.bin'}")
    return 0


def _classifier_config_from_args(args):
    from .classifier import ClassifierConfig, WeightingStrategy
    from .data import AugmentationSpec

    weighting = WeightingStrategy(args.weighting)
    aug = AugmentationSpec(mixup_alpha=0.0, policy_augment=False) if args.augment else None
    return ClassifierConfig(
        min_iters=args.min_iters,
        max_iters=args.max_iters,
        p_value=args.p_value,
        weighting=weighting,
        mask_radius=args.mask_radius,
        seed=args.seed,
        augment_spec=aug,
        prune=not args.no_prune,
    )


def cmd_classify(args) -> int:
    from .classifier import classify
    from .data import load_image, load_manifest
    from .diffusion.checkpoint import load_checkpoint
    from .diffusion.codec import IdentityCodec
    from .evaluation import classify_manifest

    ckpt = load_checkpoint(args.checkpoint)
    cfg = _classifier_config_from_args(args)
    out = Path(args.out)
    input_path = Path(args.input)

    if input_path.suffix == ".jsonl":
        manifest = load_manifest(input_path)
        rows = classify_manifest(ckpt, manifest, args.split, cfg, use_ema=not args.raw_weights)
    else:
        if input_path.is_dir():
            paths = sorted(input_path.glob("*.png"))
        else:
            paths = [input_path]
        model = ckpt.build_model(use_ema=not args.raw_weights)
        codec = IdentityCodec()
        rows = []
        for i, p in enumerate(paths):
            image = load_image(p)
            result = classify(
                image, model, codec, ckpt.schedule, ckpt.num_classes,
                replace(cfg, seed=cfg.seed + i),
            )
            row = {"path": str(p)}
            row.update(result.to_dict())
            row["predicted_label"] = ckpt.class_names[result.predicted_class]
            rows.append(row)

    _dump_jsonl(out, rows)
    _write_frozen_config(
        out.parent,
        "classify",
        {
            "checkpoint": str(args.checkpoint),
            "input": str(args.input),
            "weighting": args.weighting,
            "min_iters": args.min_iters,
            "max_iters": args.max_iters,
            "p_value": args.p_value,
            "mask_radius": args.mask_radius,
            "seed": args.seed,
            "split": args.split,
            "augment": args.augment,
            "prune": not args.no_prune,
        },
    )
    print(f"classified {len(rows)} items -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .data import load_manifest
    from .evaluation import metrics_report

    manifest = load_manifest(args.manifest)
    rows = [json.loads(line) for line in Path(args.results).read_text().splitlines() if line]
    by_path = {r.path: r for r in manifest.records}
    preds, labels = [], []
    for row in rows:
        rec = by_path.get(row["path"])
        if rec is None:
            raise ValueError(f"result path {row['path']!r} not in manifest")
        preds.append(row["predicted"])
        labels.append(manifest.class_index(rec.label))
    report = metrics_report(preds, labels, len(manifest.class_names))
    payload = {"classes": list(manifest.class_names), **report.to_dict()}
    _dump_json(Path(args.out), payload)
    _write_frozen_config(
        Path(args.out).parent,
        "evaluate",
        {"results": str(args.results), "manifest": str(args.manifest)},
    )
    print(
        f"accuracy {report.accuracy:.4f}, balanced {report.balanced_accuracy:.4f} -> {args.out}"
    )
    return 0


def _run_experiment_command(args, kind: str) -> int:
    from .evaluation import ExperimentSpec, run_experiment

    spec = ExperimentSpec.from_file(args.spec)
    if spec.kind != kind:
        raise ValueError(f"spec kind {spec.kind!r} does not match subcommand {kind!r}")
    report = run_experiment(spec)
    _write_frozen_config(Path(spec.output_dir), kind, {"spec": str(args.spec)})
    print(json.dumps({k: v for k, v in report.items() if not isinstance(v, (list, dict))}))
    return 0


def cmd_anomaly(args) -> int:
    return _run_experiment_command(args, "anomaly")


def cmd_efficiency(args) -> int:
    return _run_experiment_command(args, "efficiency")


def cmd_experiment(args) -> int:
    from .evaluation import ExperimentSpec, run_experiment

    spec = ExperimentSpec.from_file(args.spec)
    run_experiment(spec)
    _write_frozen_config(Path(spec.output_dir), spec.kind, {"spec": str(args.spec)})
    print(f"{spec.kind} report -> {spec.output_dir}/report.json")
    return 0


def cmd_heatmap(args) -> int:
    from .counterfactual import delta_adjust, heatmap, mean_error_tensors, overlay
    from .data import load_image, save_image
    from .diffusion.checkpoint import load_checkpoint
    from .diffusion.codec import IdentityCodec

    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    codec = IdentityCodec()
    image = load_image(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    tensors, mean_errors = mean_error_tensors(
        image, ckpt.num_classes, model, codec, ckpt.schedule, args.n, args.seed
    )
    predicted = int(np.argmin(mean_errors))
    deltas = {t.class_index: t.delta for t in tensors}
    adjusted = delta_adjust(deltas, predicted)

    if args.target == "all":
        targets = list(range(ckpt.num_classes))
    else:
        targets = [ckpt.class_names.index(args.target)]

    for c in targets:
        hm = heatmap(adjusted[c], codec, predicted, c)
        name = ckpt.class_names[c]
        np.save(out / f"heatmap_{name}.npy", hm.values.numpy())
        peak = float(hm.values.abs().max())
        vis = hm.values / peak if peak > 0 else hm.values
        save_image(vis, out / f"heatmap_{name}.png")
        save_image(
            overlay(image, hm, args.quantile), out / f"overlay_{name}.png"
        )

    _dump_json(
        out / "heatmap.json",
        {
            "predicted": ckpt.class_names[predicted],
            "per_class_mean_error": [float(e) for e in mean_errors],
            "n": args.n,
        },
    )
    _write_frozen_config(
        out,
        "heatmap",
        {
            "checkpoint": str(args.checkpoint),
            "input": str(args.input),
            "target": args.target,
            "n": args.n,
            "quantile": args.quantile,
            "seed": args.seed,
        },
    )
    print(f"heatmaps for {len(targets)} target(s) -> {out}")
    return 0


def cmd_sample(args) -> int:
    from .data import save_image
    from .diffusion.checkpoint import load_checkpoint
    from .diffusion.codec import IdentityCodec
    from .diffusion.process import sample

    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model(use_ema=not args.raw_weights)
    arch = ckpt.arch
    gen = torch.Generator().manual_seed(args.seed)
    images = sample(
        args.class_index,
        args.steps,
        model,
        ckpt.schedule,
        IdentityCodec(),
        gen,
        num_classes=ckpt.num_classes,
        latent_shape=(arch.channels, arch.image_size, arch.image_size),
        cond_rows=arch.cond_rows,
        cond_cols=arch.cond_cols,
        count=args.count,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = ckpt.class_names[args.class_index]
    for i in range(args.count):
        save_image(images[i].clamp(-1, 1), out / f"sample_{name}_{i:03d}.png")
    _write_frozen_config(
        out,
        "sample",
        {
            "checkpoint": str(args.checkpoint),
            "class_index": args.class_index,
            "steps": args.steps,
            "count": args.count,
            "seed": args.seed,
        },
    )
    print(f"{args.count} samples of class {name!r} -> {out}")
    return 0


def cmd_fit_psychometric(args) -> int:
    from .psychometric import (
        PriorSpec,
        bin_performance,
        fit_psychometric,
        normalize_confidences,
        threshold_at,
    )

    rows = [json.loads(line) for line in Path(args.input).read_text().splitlines() if line]
    confidences = [r["confidence"] for r in rows]
    correct = [bool(r["correct"]) for r in rows]
    if not args.normalized:
        confidences = normalize_confidences(confidences)
    bins = bin_performance(confidences, correct, args.bins)
    post = fit_psychometric(bins, args.gamma, PriorSpec())
    payload = {
        "grid": {
            "m": [float(post.m_grid[0]), float(post.m_grid[-1]), len(post.m_grid)],
            "w": [float(post.w_grid[0]), float(post.w_grid[-1]), len(post.w_grid)],
            "lambda": [
                float(post.lambda_grid[0]),
                float(post.lambda_grid[-1]),
                len(post.lambda_grid),
            ],
        },
        "gamma": args.gamma,
        "map": {
            "m": post.map_estimate.m,
            "w": post.map_estimate.w,
            "lambda": post.map_estimate.lapse,
            "threshold_80": threshold_at(post.map_estimate, 0.8),
        },
        "ci95": {k: list(v) for k, v in post.ci95.items()},
        "flags": post.flags,
        "bins": [
            {"center": b.center, "n_trials": b.n_trials, "n_correct": b.n_correct}
            for b in bins
        ],
    }
    _dump_json(Path(args.out), payload)
    _write_frozen_config(
        Path(args.out).parent,
        "fit-psychometric",
        {"input": str(args.input), "bins": args.bins, "gamma": args.gamma},
    )
    print(f"MAP m={post.map_estimate.m:.4f} w={post.map_estimate.w:.4f} -> {args.out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.studies_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_turing_report(args) -> int:
    from .service import StudyStore

    store = StudyStore(args.studies_dir)
    if args.close:
        store.close_study(args.study_id)
    payload = store.report(args.study_id)
    _dump_json(Path(args.out), payload)
    _write_frozen_config(
        Path(args.out).parent,
        "turing-report",
        {"studies_dir": str(args.studies_dir), "study_id": args.study_id},
    )
    print(f"report for study {args.study_id} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genclass", description="Generative classification toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="generate the synthetic toy dataset")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--n", type=int, default=300, help="images per class")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("train", help="train a conditional denoiser")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--set", action="append", help="override a config key (key=value)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", help="classify images with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file, directory, or manifest .jsonl")
    p.add_argument("--split", default="test", help="manifest split to classify")
    p.add_argument("--weighting", default="custom_polynomial")
    p.add_argument("--min-iters", type=int, default=20, dest="min_iters")
    p.add_argument("--max-iters", type=int, default=2000, dest="max_iters")
    p.add_argument("--p-value", type=float, default=2e-3, dest="p_value")
    p.add_argument("--mask-radius", type=int, default=None, dest="mask_radius")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--augment", action="store_true", help="inference-time augmentation")
    p.add_argument("--no-prune", action="store_true", dest="no_prune")
    p.add_argument("--raw-weights", action="store_true", help="use raw instead of EMA weights")
    p.add_argument("--out", required=True, help="results JSONL path")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="score classification results against a manifest")
    p.add_argument("--results", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    for name, handler in (("anomaly", cmd_anomaly), ("efficiency", cmd_efficiency),
                          ("experiment", cmd_experiment)):
        p = sub.add_parser(name, help=f"run a {name} experiment from a spec file")
        p.add_argument("--spec", required=True, help="ExperimentSpec JSON file")
        p.set_defaults(func=handler)

    p = sub.add_parser("heatmap", help="counterfactual heatmaps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--target", default="all", help="class name or 'all'")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--quantile", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("sample", help="generate images for one class")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class-index", type=int, required=True, dest="class_index")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raw-weights", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("fit-psychometric", help="fit a psychometric function to scores")
    p.add_argument("--input", required=True, help="JSONL rows {confidence, correct}")
    p.add_argument("--bins", type=int, default=25)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--normalized", action="store_true",
                   help="confidences are already in [0, 1]")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_psychometric)

    p = sub.add_parser("serve", help="run the annotation service")
    p.add_argument("--studies-dir", required=True, dest="studies_dir")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("turing-report", help="offline study report from the event log")
    p.add_argument("--studies-dir", required=True, dest="studies_dir")
    p.add_argument("--study-id", required=True, dest="study_id")
    p.add_argument("--close", action="store_true", help="close the study first")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_turing_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        error = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        print(json.dumps(error, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
