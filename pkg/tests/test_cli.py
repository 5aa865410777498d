import json
from pathlib import Path

import pytest

from genclass.cli import main


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-toy -> train (tiny) -> shared paths for downstream commands."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run_cli("gen-toy", "--k", 3, "--n", 12, "--size", 16,
                   "--seed", 7, "--out", data) == 0
    run = root / "run"
    assert run_cli(
        "train", "--manifest", data / "manifest.jsonl", "--out", run,
        "--set", "steps=40", "--set", "image_size=16", "--set", "T=50",
        "--set", "base_channels=8", "--set", "channel_mults=1,2",
        "--set", "rotation_degrees=0", "--set", "jitter=false",
        "--set", "mixup_alpha=0", "--set", "batch_size=8",
        "--seed", 1,
    ) == 0
    return {"data": data, "run": run, "ckpt": run / "checkpoint.bin"}


def test_gen_toy_outputs(pipeline):
    data = pipeline["data"]
    assert (data / "manifest.jsonl").exists()
    assert (data / "run_config.json").exists()
    n_images = len(list((data / "images").glob("*.png")))
    assert n_images == 36


def test_train_outputs(pipeline):
    run = pipeline["run"]
    assert pipeline["ckpt"].exists()
    log_rows = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
    assert log_rows[-1]["step"] == 40
    frozen = json.loads((run / "run_config.json").read_text())
    assert frozen["subcommand"] == "train"
    assert frozen["config"]["steps"] == 40


def test_classify_and_evaluate(pipeline, tmp_path):
    results = tmp_path / "results.jsonl"
    assert run_cli(
        "classify", "--checkpoint", pipeline["ckpt"],
        "--input", pipeline["data"] / "manifest.jsonl",
        "--min-iters", 4, "--max-iters", 10, "--seed", 0,
        "--out", results,
    ) == 0
    rows = [json.loads(l) for l in results.read_text().splitlines()]
    assert rows and all(
        set(r) >= {"path", "predicted", "confidence_raw",
                   "per_class_mean_error", "draws_used"}
        for r in rows
    )

    report = tmp_path / "report.json"
    assert run_cli(
        "evaluate", "--results", results,
        "--manifest", pipeline["data"] / "manifest.jsonl",
        "--out", report,
    ) == 0
    payload = json.loads(report.read_text())
    assert set(payload) >= {"accuracy", "balanced_accuracy", "confusion", "classes"}


def test_classify_single_image(pipeline, tmp_path):
    img = next((pipeline["data"] / "images").glob("*.png"))
    out = tmp_path / "single.jsonl"
    assert run_cli(
        "classify", "--checkpoint", pipeline["ckpt"], "--input", img,
        "--min-iters", 4, "--max-iters", 6, "--out", out,
    ) == 0
    rows = [json.loads(l) for l in out.read_text().splitlines()]
    assert len(rows) == 1
    assert rows[0]["predicted_label"] in ("ring", "speckled", "striped")


def test_classify_reproducible_byte_identical(pipeline, tmp_path):
    outs = []
    for rep in range(2):
        out = tmp_path / f"rep{rep}.jsonl"
        assert run_cli(
            "classify", "--checkpoint", pipeline["ckpt"],
            "--input", pipeline["data"] / "manifest.jsonl",
            "--min-iters", 4, "--max-iters", 8, "--seed", 3,
            "--out", out,
        ) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_sample_command(pipeline, tmp_path):
    out = tmp_path / "samples"
    assert run_cli(
        "sample", "--checkpoint", pipeline["ckpt"], "--class-index", 1,
        "--steps", 10, "--count", 2, "--seed", 4, "--out", out,
    ) == 0
    assert len(list(out.glob("sample_*.png"))) == 2


def test_heatmap_command(pipeline, tmp_path):
    img = next((pipeline["data"] / "images").glob("*.png"))
    out = tmp_path / "heat"
    assert run_cli(
        "heatmap", "--checkpoint", pipeline["ckpt"], "--input", img,
        "--target", "all", "--n", 8, "--quantile", 0.9, "--seed", 5,
        "--out", out,
    ) == 0
    sidecar = json.loads((out / "heatmap.json").read_text())
    assert sidecar["n"] == 8
    assert len(sidecar["per_class_mean_error"]) == 3
    assert len(list(out.glob("heatmap_*.png"))) == 3
    assert len(list(out.glob("overlay_*.png"))) == 3


def test_fit_psychometric_command(tmp_path):
    import numpy as np

    from genclass.psychometric import PsychometricParams, psychometric_value

    rng = np.random.default_rng(0)
    true = PsychometricParams(m=0.5, w=0.3, gamma=1 / 3, lapse=0.02)
    rows = []
    for _ in range(1500):
        x = float(rng.uniform(0, 1))
        rows.append({"confidence": x,
                     "correct": bool(rng.random() < psychometric_value(x, true))})
    scores = tmp_path / "scores.jsonl"
    scores.write_text("\n".join(json.dumps(r) for r in rows))
    out = tmp_path / "fit.json"
    assert run_cli(
        "fit-psychometric", "--input", scores, "--bins", 25,
        "--gamma", 1 / 3, "--normalized", "--out", out,
    ) == 0
    payload = json.loads(out.read_text())
    assert payload["ci95"]["m"][0] <= true.m <= payload["ci95"]["m"][1]
    assert set(payload) >= {"grid", "map", "ci95", "bins", "flags"}


def test_turing_report_command(tmp_path):
    from genclass.service import StudyStore

    store = StudyStore(tmp_path / "studies")
    items = [
        {"item_id": f"i{j}", "image_path": "x.png", "truth_is_real": j < 2,
         "intended_class": None if j < 2 else "ring"}
        for j in range(4)
    ]
    store.create_study({"study_id": "st", "mode": "turing",
                        "classes": ["ring"], "items": items})
    token = store.create_session("st", "r1")["token"]
    for _ in range(4):
        nxt = store.next_item(token)
        store.submit_judgment(token, {
            "item_id": nxt["item_id"], "guessed_real": True,
            "guessed_class": "ring",
        })
    out = tmp_path / "turing.json"
    assert run_cli(
        "turing-report", "--studies-dir", tmp_path / "studies",
        "--study-id", "st", "--close", "--out", out,
    ) == 0
    payload = json.loads(out.read_text())
    assert payload["report"]["accuracy"] == 0.5


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["classify", "--help"])
    assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_errors_are_machine_readable(tmp_path, capsys):
    code = main(["classify", "--checkpoint", str(tmp_path / "missing.bin"),
                 "--input", "x", "--out", str(tmp_path / "o.jsonl")])
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert "error" in err and err["error"]["type"]


def test_experiment_spec_kind_mismatch(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"kind": "in_domain", "output_dir": str(tmp_path)}))
    code = main(["anomaly", "--spec", str(spec)])
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert "does not match" in err["error"]["message"]
