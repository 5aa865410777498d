"""Acceptance suite: one test per release criterion.

Each test prints a single "[ACCEPTANCE] <name>: PASS/FAIL" line.  The
toy-model fixtures train small diffusion models from scratch (several
minutes each on one CPU core); set GENCLASS_CACHE to a writable
directory to reuse checkpoints across runs.
"""

import json
import math
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest
import torch

from genclass.classifier import (
    ClassifierConfig,
    WeightingStrategy,
    classify,
    collect_error_draws,
    decide_from_draws,
    paired_t_test,
)
from genclass.cli import main as cli_main
from genclass.counterfactual import delta_adjust, heatmap, mean_error_tensors
from genclass.data import (
    AugmentationSpec,
    ToyDatasetSpec,
    generate_toy_dataset,
    load_manifest,
    save_manifest,
    split_images,
)
from genclass.diffusion.codec import IdentityCodec
from genclass.diffusion.denoiser import DenoiserConfig
from genclass.diffusion.process import sample, training_loss
from genclass.diffusion.schedule import build_schedule
from genclass.evaluation import (
    ExperimentSpec,
    auc_score,
    balanced_accuracy,
    run_experiment,
    train_for_experiment,
    wilson_interval,
)
from genclass.psychometric import (
    PerformanceBin,
    PsychometricParams,
    bin_performance,
    fit_psychometric,
    psychometric_value,
)

# Desk-scale training recipe used by every toy acceptance model.
TOY_TRAIN = {
    "steps": 3500,
    "batch_size": 16,
    "lr": 1e-3,
    "warmup_steps": 100,
    "ema_decay": 0.999,
    "image_size": 32,
    "T": 1000,
    "schedule_kind": "linear_beta",
    "base_channels": 16,
    "channel_mults": [1, 2],
    "blocks_per_level": 1,
    "val_interval": 500,
    "log_interval": 500,
    "seed": 0,
}

INFER_AUG = AugmentationSpec(mixup_alpha=0.0, policy_augment=False)


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"\n[ACCEPTANCE] {name}: FAIL")
        raise
    print(f"\n[ACCEPTANCE] {name}: PASS")


# ---------------------------------------------------------------------------
# Shared trained fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def toy3(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy3")
    manifest = generate_toy_dataset(
        ToyDatasetSpec(k=3, per_class=300, image_size=32, seed=0), out
    )
    return manifest


@pytest.fixture(scope="session")
def toy3_ckpt(toy3, tmp_path_factory):
    out = tmp_path_factory.mktemp("toy3_model")
    return train_for_experiment(
        toy3, toy3.root / "manifest.jsonl", TOY_TRAIN, 0, out / "ckpt.bin"
    )


@pytest.fixture(scope="session")
def toy3_model(toy3_ckpt):
    return toy3_ckpt.build_model(use_ema=True)


def _classify_split(ckpt, model, manifest, items, labels, cfg, seed_base):
    preds, confs, draws = [], [], []
    codec = IdentityCodec()
    for i in range(len(items)):
        res = classify(
            items[i], model, codec, ckpt.schedule, ckpt.num_classes,
            replace(cfg, seed=seed_base + i),
        )
        preds.append(res.predicted_class)
        confs.append(res.confidence_raw)
        draws.append(res.draws_used)
    return np.array(preds), np.array(confs), np.array(draws)


# ---------------------------------------------------------------------------
# A1: diffusion math suite
# ---------------------------------------------------------------------------


def test_diffusion_math_suite():
    with criterion("diffusion-math-suite"):
        t0 = time.time()

        # schedule product identity, <= 1e-12 relative
        for kind, params in (
            ("linear_beta", {}),
            ("cosine", {}),
            ("constant_alpha", {"alpha": 0.7}),
        ):
            s = build_schedule(1000, kind, **params)
            assert np.allclose(s.alpha_bar, np.cumprod(s.alpha), rtol=1e-12, atol=0)
            assert np.all(np.diff(s.alpha_bar) < 0)

        # forward composition equals the marginal (3 sigma over 1e4 draws)
        T = 8
        s = build_schedule(T, "linear_beta", beta_start=0.02, beta_end=0.25)
        n = 10_000
        z0 = torch.tensor([[[0.9, -1.1], [0.2, 1.7]]], dtype=torch.float64)
        gen = torch.Generator().manual_seed(0)
        z = z0.unsqueeze(0).expand(n, 1, 2, 2).clone()
        for t in range(1, T + 1):
            a = s.alpha_at(t)
            z = math.sqrt(a) * z + math.sqrt(1 - a) * torch.randn(
                z.shape, generator=gen, dtype=torch.float64
            )
        a_bar = s.alpha_bar_at(T)
        want_mean, want_var = math.sqrt(a_bar) * z0, 1 - a_bar
        assert torch.all(
            (z.mean(0) - want_mean).abs() < 3 * math.sqrt(want_var / n)
        )
        assert torch.all(
            (z.var(0) - want_var).abs() < 3 * math.sqrt(2 * want_var**2 / (n - 1))
        )

        # oracle predictor: exactly zero loss
        class Replay(torch.nn.Module):
            def __init__(self, seed, shape, T):
                super().__init__()
                g = torch.Generator().manual_seed(seed)
                torch.randint(1, T + 1, (shape[0],), generator=g)
                self.eps = torch.randn(shape, generator=g)

            def forward(self, z_t, t, cond):
                return self.eps

        s10 = build_schedule(10, "linear_beta", beta_start=0.01, beta_end=0.2)
        z0b = torch.randn((6, 1, 4, 4), generator=torch.Generator().manual_seed(3))
        loss = training_loss(
            z0b, torch.zeros(6, 2, 2), Replay(9, z0b.shape, 10), s10,
            torch.Generator().manual_seed(9),
        )
        assert loss.item() == 0.0

        # analytic gradients vs central differences, <= 1e-4 relative
        class TwoLayer(torch.nn.Module):
            def __init__(self):
                super().__init__()
                torch.manual_seed(0)
                self.c1 = torch.nn.Conv2d(1, 4, 3, padding=1).double()
                self.c2 = torch.nn.Conv2d(4, 1, 3, padding=1).double()

            def forward(self, z_t, t, cond):
                return self.c2(torch.nn.functional.silu(self.c1(z_t)))

        model = TwoLayer()
        z0g = torch.randn((4, 1, 5, 5), generator=torch.Generator().manual_seed(2),
                          dtype=torch.float64)
        cond = torch.zeros(4, 2, 2, dtype=torch.float64)

        def loss_fn():
            return training_loss(z0g, cond, model, s10,
                                 torch.Generator().manual_seed(44))

        loss_fn().backward()
        params = list(model.parameters())
        grads = torch.cat([p.grad.reshape(-1) for p in params])
        rng = np.random.default_rng(1)
        total = sum(p.numel() for p in params)
        h = 1e-6
        for idx in rng.choice(total, size=10, replace=False):
            rem = int(idx)
            for p in params:
                if rem < p.numel():
                    break
                rem -= p.numel()
            flat = p.data.reshape(-1)
            orig = flat[rem].item()
            flat[rem] = orig + h
            up = loss_fn().item()
            flat[rem] = orig - h
            down = loss_fn().item()
            flat[rem] = orig
            fd = (up - down) / (2 * h)
            assert fd == pytest.approx(grads[idx].item(), rel=1e-4, abs=1e-8)

        elapsed = time.time() - t0
        assert elapsed < 300, f"math suite took {elapsed:.0f}s"


# ---------------------------------------------------------------------------
# A2: toy classification at paper defaults
# ---------------------------------------------------------------------------


def test_toy_classification(toy3, toy3_ckpt, toy3_model):
    with criterion("toy-classification"):
        images, labels, _ = split_images(toy3, "test")
        cfg = ClassifierConfig(
            min_iters=20, max_iters=2000, p_value=2e-3,
            weighting=WeightingStrategy("custom_polynomial"),
            augment_spec=INFER_AUG,
        )
        preds, _, draws = _classify_split(
            toy3_ckpt, toy3_model, toy3, images, labels, cfg, seed_base=1000
        )
        bal = balanced_accuracy(preds, labels, 3)
        print(f"\n  balanced accuracy {bal:.4f}, mean draws {draws.mean():.1f}")
        assert bal >= 0.95


# ---------------------------------------------------------------------------
# A3: weighting-ablation ordering (plus draw-count monotonicity)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def ablation_draws(toy3, toy3_ckpt, toy3_model):
    """1000 raw error draws per item on a 60-item stratified test subset."""
    images, labels, _ = split_images(toy3, "test")
    idx = np.concatenate([np.where(labels == c)[0][:20] for c in range(3)])
    cfg = ClassifierConfig(augment_spec=INFER_AUG, draw_block=25)
    codec = IdentityCodec()
    collected = []
    for i in idx:
        draws = collect_error_draws(
            images[i], toy3_model, codec, toy3_ckpt.schedule, 3, 1000,
            replace(cfg, seed=2000 + int(i)),
        )
        collected.append((int(labels[i]), draws))
    return collected


def test_weighting_ablation_ordering(toy3_ckpt, ablation_draws):
    with criterion("weighting-ablation-ordering"):
        schedule = toy3_ckpt.schedule

        def accuracy(strategy, n_draws):
            hits = 0
            for label, draws in ablation_draws:
                pred, _ = decide_from_draws(draws[:n_draws], strategy, schedule)
                hits += int(pred == label)
            return hits / len(ablation_draws)

        custom = accuracy(WeightingStrategy("custom_polynomial"), 1000)
        uniform = accuracy(WeightingStrategy("uniform"), 1000)
        print(f"\n  custom polynomial {custom:.4f} vs uniform {uniform:.4f}")
        assert custom >= uniform - 0.01

        # accuracy should not degrade as draws accumulate
        few = accuracy(WeightingStrategy("custom_polynomial"), 10)
        assert custom >= few


# ---------------------------------------------------------------------------
# A4: pruning fidelity
# ---------------------------------------------------------------------------


def test_pruning_fidelity(toy3, toy3_ckpt, toy3_model):
    with criterion("pruning-fidelity"):
        images, labels, _ = split_images(toy3, "test")
        max_iters = 400
        codec = IdentityCodec()
        agree = 0
        draws_used = []
        for i in range(len(images)):
            pruned_cfg = ClassifierConfig(
                min_iters=20, max_iters=max_iters, p_value=2e-4,
                weighting=WeightingStrategy("custom_polynomial"),
                augment_spec=INFER_AUG, seed=3000 + i,
            )
            res = classify(images[i], toy3_model, codec, toy3_ckpt.schedule, 3,
                           pruned_cfg)
            full = classify(images[i], toy3_model, codec, toy3_ckpt.schedule, 3,
                            replace(pruned_cfg, prune=False))
            agree += int(res.predicted_class == full.predicted_class)
            draws_used.append(res.draws_used)
        rate = agree / len(images)
        mean_draws = float(np.mean(draws_used))
        print(f"\n  agreement {rate:.4f}, mean draws {mean_draws:.1f} of {max_iters}")
        assert rate >= 0.99
        assert mean_draws < 0.5 * max_iters


# ---------------------------------------------------------------------------
# A5: statistical oracles
# ---------------------------------------------------------------------------


def test_statistical_oracles():
    with criterion("statistical-oracles"):
        from scipy import stats
        from statsmodels.stats.proportion import proportion_confint

        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(2, 50))
            a = rng.normal(rng.normal(0, 0.4), 1.0, n)
            b = rng.normal(0, 1.0, n)
            ref = stats.ttest_rel(a, b, alternative="greater").pvalue
            assert paired_t_test(a, b) == pytest.approx(float(ref), abs=1e-9)

        for _ in range(100):
            n_pos = int(rng.integers(2, 40))
            n_neg = int(rng.integers(2, 40))
            pos = np.round(rng.normal(0.3, 1.0, n_pos), 1)
            neg = np.round(rng.normal(0.0, 1.0, n_neg), 1)
            wins = sum(1 for p in pos for q in neg if p > q)
            ties = sum(1 for p in pos for q in neg if p == q)
            assert auc_score(pos, neg) == (wins + 0.5 * ties) / (n_pos * n_neg)

        for _ in range(50):
            n = int(rng.integers(5, 3000))
            k = int(rng.integers(0, n + 1))
            lo, hi = wilson_interval(k, n)
            rlo, rhi = proportion_confint(k, n, alpha=0.05, method="wilson")
            assert lo == pytest.approx(rlo, abs=1e-9)
            assert hi == pytest.approx(rhi, abs=1e-9)


# ---------------------------------------------------------------------------
# A6: anomaly detection at toy scale
# ---------------------------------------------------------------------------


def test_anomaly_toy(tmp_path_factory):
    with criterion("anomaly-toy"):
        out = tmp_path_factory.mktemp("anomaly")
        manifest = generate_toy_dataset(
            ToyDatasetSpec(k=4, per_class=300, image_size=32, seed=1), out
        )
        held = manifest.class_names[3]
        assert held == "zigzag"
        # held-out class appears only in the test split
        kept = tuple(
            r for r in manifest.records
            if not (r.label == held and r.split != "test")
        )
        clean = replace(manifest, records=kept)
        clean_path = out / "anomaly_manifest.jsonl"
        save_manifest(clean, clean_path)

        spec = ExperimentSpec(
            kind="anomaly",
            output_dir=str(out / "run"),
            train_manifest=str(clean_path),
            held_out_class=held,
            train=dict(TOY_TRAIN),
            classifier={},
        )
        report = run_experiment(spec)
        print(f"\n  AUC {report['auc']:.4f} vs pixel baseline {report['baseline_auc']:.4f}")
        assert report["auc"] >= 0.90
        assert report["auc"] > report["baseline_auc"]


# ---------------------------------------------------------------------------
# A7: psychometric recovery
# ---------------------------------------------------------------------------


def test_psychometric_recovery():
    with criterion("psychometric-recovery"):
        true = PsychometricParams(m=0.5, w=0.3, gamma=0.1, lapse=0.02)
        cover_m = cover_w = 0
        for rep in range(40):
            rng = np.random.default_rng(500 + rep)
            x = rng.uniform(0, 1, 2000)
            correct = rng.random(2000) < psychometric_value(x, true)
            post = fit_psychometric(bin_performance(x, correct, 25), gamma_fixed=0.1)
            lo, hi = post.ci95["m"]
            cover_m += lo <= true.m <= hi
            lo, hi = post.ci95["w"]
            cover_w += lo <= true.w <= hi
        print(f"\n  coverage m {cover_m}/40, w {cover_w}/40")
        assert cover_m >= 34  # 85% of 40
        assert cover_w >= 34

        # data carrying no information leaves the posterior at the prior
        bins = [PerformanceBin(center=(i + 0.5) / 25, n_trials=0, n_correct=0)
                for i in range(25)]
        flat = fit_psychometric(bins, gamma_fixed=0.1)
        kl = flat.kl_from_prior()
        assert kl < 0.05


# ---------------------------------------------------------------------------
# A8: counterfactual identities
# ---------------------------------------------------------------------------


def test_counterfactual_identities(toy3, toy3_ckpt, toy3_model):
    with criterion("counterfactual-identities"):
        codec = IdentityCodec()
        images, _, _ = split_images(toy3, "test")
        image = images[0]
        tensors, errors = mean_error_tensors(
            image, 3, toy3_model, codec, toy3_ckpt.schedule, n_draws=64, seed=0
        )
        predicted = int(np.argmin(errors))
        deltas = {t.class_index: t.delta for t in tensors}
        adjusted = delta_adjust(deltas, predicted)
        assert torch.equal(adjusted[predicted],
                           torch.zeros_like(adjusted[predicted]))

        for c in range(3):
            h = heatmap(adjusted[c], codec, predicted, c)
            assert h.values is adjusted[c]  # identity codec: bit-exact

        # Monte-Carlo standard error of the mean tensor scales ~1/sqrt(N)
        class Zero(torch.nn.Module):
            config = DenoiserConfig(channels=1, image_size=8, cond_rows=2,
                                    cond_cols=2)

            def forward(self, z_t, t, cond):
                return torch.zeros_like(z_t)

        small = torch.zeros(1, 8, 8)
        s8 = build_schedule(10, "linear_beta", beta_start=0.02, beta_end=0.2)

        def spread(n_draws):
            reps = []
            for rep in range(10):
                ts, _ = mean_error_tensors(small, 1, Zero(), codec, s8,
                                           n_draws, seed=700 + rep)
                reps.append(ts[0].delta.reshape(-1).numpy())
            return np.stack(reps).std(axis=0).mean()

        ratio = spread(100) / spread(400)
        print(f"\n  SE ratio N=100/N=400: {ratio:.3f} (ideal 2.0)")
        assert 2.0 / 1.5 < ratio < 2.0 * 1.5


# ---------------------------------------------------------------------------
# A9: realness-test metrics regression
# ---------------------------------------------------------------------------


def test_turing_metrics_regression():
    with criterion("turing-metrics-regression"):
        from genclass.evaluation import turing_metrics

        rng = np.random.default_rng(2)
        rows = []
        for i in range(150):
            real = i < 70
            rows.append({
                "item_id": f"i{i}",
                "truth_is_real": real,
                "guessed_real": bool(rng.random() < (0.6 if real else 0.45)),
                "intended_class": None if real else "a",
                "guessed_class": "a" if rng.random() < 0.8 else "b",
            })
        rep = turing_metrics(rows)
        n_real, n_synth = 70, 80
        assert rep.accuracy == pytest.approx(
            (rep.sensitivity * n_real + rep.specificity * n_synth) / 150, abs=1e-12
        )
        k_correct = round(rep.accuracy * 150)
        assert wilson_interval(k_correct, 150) == rep.ci95

        # paper-scale interval fixture: 2880 assessments at 52.3%
        k = round(0.523 * 2880)
        lo, hi = wilson_interval(k, 2880)
        assert abs(lo - 0.505) <= 0.003
        assert abs(hi - 0.542) <= 0.003


# ---------------------------------------------------------------------------
# A10: CLI reproducibility
# ---------------------------------------------------------------------------


def test_cli_reproducibility(toy3, toy3_ckpt, tmp_path_factory):
    with criterion("cli-reproducibility"):
        base = tmp_path_factory.mktemp("repro")

        # gen-toy twice: byte-identical manifest and images
        for rep in range(2):
            assert cli_main([
                "gen-toy", "--k", "2", "--n", "6", "--size", "16",
                "--seed", "5", "--out", str(base / f"g{rep}"),
            ]) == 0
        m0 = (base / "g0" / "manifest.jsonl").read_bytes()
        m1 = (base / "g1" / "manifest.jsonl").read_bytes()
        assert m0 == m1
        for p0 in sorted((base / "g0" / "images").glob("*.png")):
            p1 = base / "g1" / "images" / p0.name
            assert p0.read_bytes() == p1.read_bytes()

        # classify twice with one seed: byte-identical result JSONL
        ckpt_path = base / "ckpt.bin"
        from genclass.diffusion.checkpoint import save_checkpoint
        save_checkpoint(toy3_ckpt, ckpt_path)
        img_dir = base / "subset"
        img_dir.mkdir()
        test_records = toy3.split("test")[:6]
        for r in test_records:
            (img_dir / r.path.split("/")[-1]).write_bytes(
                (toy3.root / r.path).read_bytes()
            )
        outs = []
        for rep in range(2):
            out = base / f"res{rep}.jsonl"
            assert cli_main([
                "classify", "--checkpoint", str(ckpt_path),
                "--input", str(img_dir), "--min-iters", "20",
                "--max-iters", "100", "--seed", "11", "--out", str(out),
            ]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


# ---------------------------------------------------------------------------
# Toy sampling self-consistency (generation quality check)
# ---------------------------------------------------------------------------


def test_sample_self_consistency(toy3_ckpt, toy3_model):
    codec = IdentityCodec()
    agree = total = 0
    for c in range(3):
        gen = torch.Generator().manual_seed(42 + c)
        images = sample(
            c, 50, toy3_model, toy3_ckpt.schedule, codec, gen,
            num_classes=3, latent_shape=(1, 32, 32), cond_rows=8,
            cond_cols=8, count=17,
        )
        for i in range(images.shape[0]):
            res = classify(
                images[i].clamp(-1, 1), toy3_model, codec, toy3_ckpt.schedule,
                3, ClassifierConfig(seed=4000 + c * 100 + i),
            )
            agree += int(res.predicted_class == c)
            total += 1
    rate = agree / total
    print(f"\n  sample->classify agreement {agree}/{total}")
    assert rate >= 0.90
