"""Classification by per-class noise-prediction error.

For each draw a timestep t and noise tensor are sampled once and shared
across every candidate class (paired design); the per-class masked
squared errors are normalized by a weighting strategy and accumulated.
After a warm-up, classes whose error history is significantly worse
than the current best (one-sided paired t-test) are pruned.  The
surviving argmin is the prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.special import stdtr

from .data import AugmentationSpec, augment
from .diffusion.codec import LatentCodec
from .diffusion.conditioning import class_condition, stack_conditions
from .diffusion.schedule import NoiseSchedule, training_weight

WEIGHTING_KINDS = (
    "custom_polynomial",
    "logistic_learned",
    "normalized_per_draw",
    "ranking",
    "uniform",
    "snr",
    "exp_decay",
)

# Reciprocal-polynomial weighting: 1 / f(t/T) with f fitted to the
# spread of squared errors over rescaled time.
POLY_COEFFS = (0.927, 9.837, -4.684, 6.019, -9.340)

SCALAR_KINDS = ("custom_polynomial", "logistic_learned", "uniform", "snr", "exp_decay")


def poly_f(u: float | np.ndarray) -> float | np.ndarray:
    c0, c1, c2, c3, c4 = POLY_COEFFS
    return c0 + c1 * u + c2 * u**2 + c3 * u**3 + c4 * u**4


@dataclass(frozen=True)
class WeightingStrategy:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in WEIGHTING_KINDS:
            raise ValueError(f"unknown weighting kind {self.kind!r}")
        if self.kind == "exp_decay":
            self.params.setdefault("k", 5.5)
        if self.kind == "logistic_learned" and "bucket_weights" not in self.params:
            raise ValueError("logistic_learned requires fitted bucket_weights")

    @property
    def is_scalar(self) -> bool:
        return self.kind in SCALAR_KINDS


def weighting(kind: str, **params) -> WeightingStrategy:
    return WeightingStrategy(kind=kind, params=params)


def time_bucket(t: int, T: int, n_buckets: int = 20) -> int:
    """Bucket index for timestep t in [1, T]."""
    return min(n_buckets - 1, (t - 1) * n_buckets // T)


def scalar_weight(t: int, strategy: WeightingStrategy, schedule: NoiseSchedule) -> float:
    """Per-timestep multiplier for scalar strategies."""
    u = t / schedule.T
    if strategy.kind == "uniform":
        return 1.0
    if strategy.kind == "snr":
        return training_weight(t, schedule)
    if strategy.kind == "exp_decay":
        return math.exp(-strategy.params["k"] * u)
    if strategy.kind == "custom_polynomial":
        f = float(poly_f(u))
        if f <= 0:
            raise ValueError(f"polynomial non-positive at rescaled t={u}")
        return 1.0 / f
    if strategy.kind == "logistic_learned":
        weights = strategy.params["bucket_weights"]
        return float(weights[time_bucket(t, schedule.T, len(weights))])
    raise ValueError(f"{strategy.kind} has no scalar weight")


@dataclass(frozen=True)
class ErrorDraw:
    """One draw: timestep, optional noise seed, per-class masked errors."""

    t: int
    eps_seed: int | None
    per_class_error: np.ndarray  # (K,), >= 0

    def __post_init__(self):
        if np.any(self.per_class_error < 0):
            raise ValueError("per-class errors must be non-negative")


def _rank_average(values: np.ndarray) -> np.ndarray:
    """Ranks 1..K with ties replaced by the average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    ranks[order] = np.arange(1, len(values) + 1, dtype=np.float64)
    for v in np.unique(values):
        mask = values == v
        if mask.sum() > 1:
            ranks[mask] = ranks[mask].mean()
    return ranks


def normalize_errors(
    draw: ErrorDraw, strategy: WeightingStrategy, schedule: NoiseSchedule
) -> np.ndarray:
    """Map one draw's K raw errors onto the accumulation scale."""
    errors = np.asarray(draw.per_class_error, dtype=np.float64)
    if strategy.is_scalar:
        return errors * scalar_weight(draw.t, strategy, schedule)
    if strategy.kind == "normalized_per_draw":
        std = errors.std()
        if std == 0.0:
            return np.zeros_like(errors)
        return (errors - errors.mean()) / std
    if strategy.kind == "ranking":
        return _rank_average(errors)
    raise ValueError(f"unhandled strategy {strategy.kind}")


def paired_t_test(a: np.ndarray | list, b: np.ndarray | list) -> float:
    """One-sided p-value that mean(a - b) > 0 (a systematically worse).

    Zero-variance differences resolve by sign of the mean difference:
    p=0 if positive, p=1 otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-d and equal length")
    n = len(a)
    if n < 2:
        raise ValueError("need at least 2 paired observations")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        return 0.0 if mean > 0 else 1.0
    t_stat = mean / (sd / math.sqrt(n))
    # Survival function of Student's t with n-1 dof.
    return float(stdtr(n - 1, -t_stat))


# ---------------------------------------------------------------------------
# Masking and per-class errors
# ---------------------------------------------------------------------------


def center_mask(shape: tuple[int, int], radius: int) -> np.ndarray:
    """Boolean (H, W) mask of cells within `radius` of the image center."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    h, w = shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    return np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) <= radius


def _mask_tensor(mask: np.ndarray | None, like: torch.Tensor) -> torch.Tensor | None:
    if mask is None:
        return None
    return torch.from_numpy(mask.astype(np.bool_)).to(like.device)


def _masked_sq_errors(
    eps: torch.Tensor, pred: torch.Tensor, mask: torch.Tensor | None
) -> torch.Tensor:
    """Row-wise masked squared L2 error for a (B, C, H, W) batch."""
    diff = (eps - pred) ** 2
    if mask is not None:
        diff = diff * mask
    return diff.sum(dim=(1, 2, 3))


def per_class_errors(
    z0: torch.Tensor,
    t: int,
    eps: torch.Tensor,
    model: torch.nn.Module,
    schedule: NoiseSchedule,
    conds: torch.Tensor,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Masked squared error of the noise prediction for every class.

    z_t is computed once from (z0, t, eps) and shared across classes.
    conds: (K, R, D) conditioning batch.
    """
    if eps.shape != z0.shape:
        raise ValueError("noise and latent shapes differ")
    from .diffusion.process import forward_marginal

    K = conds.shape[0]
    z_t = forward_marginal(z0, t, eps, schedule)
    batch = z_t.unsqueeze(0).expand(K, *z_t.shape)
    eps_b = eps.unsqueeze(0).expand(K, *eps.shape)
    t_tensor = torch.full((K,), t, dtype=torch.long)
    with torch.no_grad():
        pred = model(batch, t_tensor, conds)
    errors = _masked_sq_errors(eps_b, pred, _mask_tensor(mask, z0))
    return errors.cpu().numpy().astype(np.float64)


# ---------------------------------------------------------------------------
# Learned per-bucket weights
# ---------------------------------------------------------------------------


def fit_logistic_weights(
    calibration: list[tuple[int, float, bool]],
    T: int,
    n_buckets: int = 20,
) -> WeightingStrategy:
    """Learn per-bucket weights from (t, error, is_correct_class) rows.

    Within each time bucket a logistic regression separates correct-class
    from wrong-class errors; the slope magnitude becomes the bucket's
    weight (shrunk toward uniform, normalized to mean 1).
    """
    from sklearn.linear_model import LogisticRegression

    rows_by_bucket: dict[int, list[tuple[float, bool]]] = {
        b: [] for b in range(n_buckets)
    }
    for t, error, is_correct in calibration:
        rows_by_bucket[time_bucket(int(t), T, n_buckets)].append(
            (float(error), bool(is_correct))
        )

    betas = np.zeros(n_buckets)
    for b in range(n_buckets):
        rows = rows_by_bucket[b]
        if not rows:
            raise ValueError(f"calibration has no rows in time bucket {b}")
        x = np.array([r[0] for r in rows])
        y = np.array([r[1] for r in rows], dtype=int)
        if len(np.unique(y)) < 2:
            continue
        sd = x.std()
        if sd == 0:
            continue
        x_std = ((x - x.mean()) / sd).reshape(-1, 1)
        clf = LogisticRegression(C=10.0, solver="lbfgs", max_iter=500)
        clf.fit(x_std, y)
        betas[b] = abs(float(clf.coef_[0][0]))

    # deadband against sampling noise in buckets with no real separation
    betas = np.maximum(betas - 0.3, 0.0)
    weights = 1.0 + betas
    weights = weights / weights.mean()
    return WeightingStrategy(
        kind="logistic_learned",
        params={"bucket_weights": [float(w) for w in weights]},
    )


# ---------------------------------------------------------------------------
# Accumulation and pruning
# ---------------------------------------------------------------------------


@dataclass
class ClassifierConfig:
    min_iters: int = 20
    max_iters: int = 2000
    p_value: float = 2e-3
    weighting: WeightingStrategy = field(
        default_factory=lambda: WeightingStrategy("custom_polynomial")
    )
    mask_radius: int | None = None
    seed: int = 0
    augment_spec: AugmentationSpec | None = None
    prune: bool = True
    draw_block: int = 10
    forward_batch: int = 128

    def __post_init__(self):
        if not 1 <= self.min_iters <= self.max_iters:
            raise ValueError("need 1 <= min_iters <= max_iters")
        if not 0.0 < self.p_value < 1.0:
            raise ValueError("p_value must be in (0, 1)")


class TrialAccumulator:
    """Per-class normalized-error histories plus the active-class set.

    Active classes all have draws_used history entries; pruned classes
    keep their mean frozen at the moment of elimination and never
    rejoin.
    """

    def __init__(self, num_classes: int, max_iters: int):
        if num_classes < 1:
            raise ValueError("need at least one class")
        self.num_classes = num_classes
        self.histories = np.zeros((num_classes, max_iters), dtype=np.float64)
        self.active: list[int] = list(range(num_classes))
        self.draws_used = 0
        self.frozen_mean: dict[int, float] = {}
        self.prune_events: list[dict] = []
        self._last_pruned: int | None = None

    def append(self, normalized: np.ndarray) -> None:
        """Record one draw's normalized errors for the active classes."""
        if len(normalized) != len(self.active):
            raise ValueError("normalized errors must match active set size")
        self.histories[self.active, self.draws_used] = normalized
        self.draws_used += 1

    def history(self, c: int) -> np.ndarray:
        return self.histories[c, : self.draws_used]

    def mean(self, c: int) -> float:
        if c in self.frozen_mean:
            return self.frozen_mean[c]
        return float(self.history(c).mean())

    def means(self) -> np.ndarray:
        return np.array([self.mean(c) for c in range(self.num_classes)])

    def best_active(self) -> int:
        active_means = [self.mean(c) for c in self.active]
        return self.active[int(np.argmin(active_means))]

    def prune_class(self, c: int) -> None:
        self.frozen_mean[c] = float(self.history(c).mean())
        self.active.remove(c)
        self._last_pruned = c

    @property
    def last_pruned(self) -> int | None:
        return self._last_pruned


def prune_classes(acc: TrialAccumulator, cfg: ClassifierConfig) -> list[int]:
    """Eliminate active classes significantly worse than the current best.

    No-op before min_iters draws.  The best class is never removed.
    Returns the updated active set.
    """
    if acc.draws_used < cfg.min_iters or len(acc.active) <= 1:
        return acc.active
    best = acc.best_active()
    best_hist = acc.history(best)
    removed = []
    for c in list(acc.active):
        if c == best:
            continue
        p = paired_t_test(acc.history(c), best_hist)
        if p <= cfg.p_value:
            acc.prune_class(c)
            removed.append(c)
    if removed:
        acc.prune_events.append(
            {"draw": acc.draws_used, "pruned": removed, "active": sorted(acc.active)}
        )
    return acc.active


# ---------------------------------------------------------------------------
# Draw generation and classification
# ---------------------------------------------------------------------------


@dataclass
class ClassificationResult:
    predicted_class: int
    confidence_raw: float
    per_class_mean_error: np.ndarray
    draws_used: int
    active_trace: list[dict]

    def to_dict(self) -> dict:
        return {
            "predicted": int(self.predicted_class),
            "confidence_raw": float(self.confidence_raw),
            "per_class_mean_error": [float(v) for v in self.per_class_mean_error],
            "draws_used": int(self.draws_used),
            "active_trace": self.active_trace,
        }


class _DrawSampler:
    """Draws (t, eps, possibly augmented z0) shared across classes.

    The torch generator stream is consumed identically regardless of the
    active-class set, so pruned and unpruned runs with the same seed see
    identical draws.
    """

    def __init__(
        self,
        image: torch.Tensor,
        codec: LatentCodec,
        schedule: NoiseSchedule,
        cfg: ClassifierConfig,
    ):
        self.image = image
        self.codec = codec
        self.schedule = schedule
        self.cfg = cfg
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.aug_rng = np.random.default_rng(cfg.seed)
        self.base_z0 = codec.encode(image)

    def block(self, n: int) -> tuple[np.ndarray, torch.Tensor, torch.Tensor]:
        """Sample n draws: timesteps (n,), noise (n,*L), noisy z_t (n,*L).

        The generator is consumed one draw at a time, so the stream is
        identical no matter how draws are grouped into blocks.
        """
        ts = np.empty(n, dtype=np.int64)
        eps_list = []
        z0_list = []
        aug = (
            self.cfg.augment_spec.inference_variant()
            if self.cfg.augment_spec is not None
            else None
        )
        for i in range(n):
            ts[i] = int(
                torch.randint(1, self.schedule.T + 1, (1,), generator=self.gen)
            )
            eps_list.append(
                torch.randn(self.base_z0.shape, generator=self.gen)
            )
            if aug is not None:
                img, _, _ = augment(self.image, _DUMMY_COND, aug, self.aug_rng)
                z0_list.append(self.codec.encode(img))
            else:
                z0_list.append(self.base_z0)
        eps = torch.stack(eps_list)
        z0 = torch.stack(z0_list)
        a_bar = torch.tensor(
            self.schedule.alpha_bar[ts - 1], dtype=z0.dtype
        ).view(n, 1, 1, 1)
        z_t = torch.sqrt(a_bar) * z0 + torch.sqrt(1.0 - a_bar) * eps
        return ts, eps, z_t


# Placeholder condition for augmentation calls that never mix.
_DUMMY_COND = class_condition(0, 1, 1, 1)


def _forward_errors(
    model: torch.nn.Module,
    z_t: torch.Tensor,
    eps: torch.Tensor,
    ts: np.ndarray,
    conds: torch.Tensor,
    mask: torch.Tensor | None,
    forward_batch: int,
) -> np.ndarray:
    """Errors for every (draw, class) pair; returns (n_draws, K)."""
    n, k = len(ts), conds.shape[0]
    z_rep = z_t.repeat_interleave(k, dim=0)
    eps_rep = eps.repeat_interleave(k, dim=0)
    t_rep = torch.as_tensor(ts, dtype=torch.long).repeat_interleave(k)
    cond_rep = conds.repeat(n, 1, 1)
    out = torch.empty(n * k, dtype=torch.float64)
    with torch.no_grad():
        for start in range(0, n * k, forward_batch):
            stop = min(start + forward_batch, n * k)
            pred = model(z_rep[start:stop], t_rep[start:stop], cond_rep[start:stop])
            out[start:stop] = _masked_sq_errors(
                eps_rep[start:stop], pred, mask
            ).double()
    return out.numpy().reshape(n, k)


def collect_error_draws(
    image: torch.Tensor,
    model: torch.nn.Module,
    codec: LatentCodec,
    schedule: NoiseSchedule,
    num_classes: int,
    n_draws: int,
    cfg: ClassifierConfig,
) -> list[ErrorDraw]:
    """Raw (unnormalized) per-class errors for a fixed number of draws.

    Useful for weighting ablations: the same draws can be re-normalized
    under different strategies.
    """
    arch = model.config
    conds = stack_conditions(
        [
            class_condition(c, num_classes, arch.cond_rows, arch.cond_cols)
            for c in range(num_classes)
        ]
    )
    mask = _build_mask(cfg, image)
    sampler = _DrawSampler(image, codec, schedule, cfg)
    draws: list[ErrorDraw] = []
    block = max(cfg.draw_block, 32)
    while len(draws) < n_draws:
        n = min(block, n_draws - len(draws))
        ts, eps, z_t = sampler.block(n)
        errs = _forward_errors(model, z_t, eps, ts, conds, mask, cfg.forward_batch)
        for i in range(n):
            draws.append(
                ErrorDraw(t=int(ts[i]), eps_seed=None, per_class_error=errs[i])
            )
    return draws


def decide_from_draws(
    draws: list[ErrorDraw],
    strategy: WeightingStrategy,
    schedule: NoiseSchedule,
) -> tuple[int, np.ndarray]:
    """No-pruning argmin over the mean normalized error of stored draws."""
    if not draws:
        raise ValueError("no draws")
    total = np.zeros_like(draws[0].per_class_error, dtype=np.float64)
    for d in draws:
        total += normalize_errors(d, strategy, schedule)
    means = total / len(draws)
    return int(np.argmin(means)), means


def _next_block(acc: TrialAccumulator, cfg: ClassifierConfig) -> int:
    if acc.draws_used < cfg.min_iters:
        return cfg.min_iters - acc.draws_used
    return min(cfg.draw_block, cfg.max_iters - acc.draws_used)


def _finished(acc: TrialAccumulator, cfg: ClassifierConfig) -> bool:
    if acc.draws_used >= cfg.max_iters:
        return True
    return len(acc.active) == 1 and acc.draws_used >= cfg.min_iters


def _build_mask(cfg: ClassifierConfig, image: torch.Tensor) -> torch.Tensor | None:
    if cfg.mask_radius is None:
        return None
    h, w = image.shape[-2:]
    return _mask_tensor(center_mask((h, w), cfg.mask_radius), image)


def classify(
    image: torch.Tensor,
    model: torch.nn.Module,
    codec: LatentCodec,
    schedule: NoiseSchedule,
    num_classes: int,
    cfg: ClassifierConfig,
) -> ClassificationResult:
    """Full classification loop with accumulation and optional pruning.

    Stops when one class remains or max_iters draws are spent.  Ties in
    the final argmin break toward the lowest class index.
    """
    if num_classes < 1:
        raise ValueError("need at least one class")
    arch = model.config
    conds_all = stack_conditions(
        [
            class_condition(c, num_classes, arch.cond_rows, arch.cond_cols)
            for c in range(num_classes)
        ]
    )
    mask = _build_mask(cfg, image)
    sampler = _DrawSampler(image, codec, schedule, cfg)
    acc = TrialAccumulator(num_classes, cfg.max_iters)

    while not _finished(acc, cfg):
        block = _next_block(acc, cfg)
        block_active = list(acc.active)
        ts, eps, z_t = sampler.block(block)
        errs = _forward_errors(
            model, z_t, eps, ts, conds_all[block_active], mask, cfg.forward_batch
        )
        for i in range(block):
            # Classes pruned earlier in this block no longer accumulate.
            cols = [block_active.index(c) for c in acc.active]
            draw = ErrorDraw(
                t=int(ts[i]), eps_seed=None, per_class_error=errs[i, cols]
            )
            acc.append(normalize_errors(draw, cfg.weighting, schedule))
            if cfg.prune:
                prune_classes(acc, cfg)
            if _finished(acc, cfg):
                break

    means = acc.means()
    active_means = [(acc.mean(c), c) for c in acc.active]
    predicted = min(active_means)[1]

    if num_classes == 1:
        confidence = 0.0
    elif len(acc.active) >= 2:
        vals = sorted(m for m, _ in active_means)
        confidence = vals[1] - vals[0]
    else:
        runner_up = acc.frozen_mean[acc.last_pruned]
        confidence = max(0.0, runner_up - acc.mean(predicted))

    return ClassificationResult(
        predicted_class=predicted,
        confidence_raw=float(confidence),
        per_class_mean_error=means,
        draws_used=acc.draws_used,
        active_trace=acc.prune_events,
    )
