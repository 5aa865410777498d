"""Confidence scores and Bayesian psychometric-function estimation.

Model confidence is the gap between the two smallest per-class mean
errors.  Performance as a function of (normalized) confidence is fitted
with a psychometric function

    psi(x) = gamma + (1 - gamma - lambda) * S(x; m, w)

where S is a logistic sigmoid with S(m) = 0.5 and w the distance between
the S=0.05 and S=0.95 points, gamma the guess rate (fixed), lambda the
lapse rate.  The fit is a grid posterior over (m, w, lambda) with a
binomial likelihood per confidence bin.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

LABELLER_CONFIDENCE_SCORES = {
    "High": 1.0,
    "Moderate": 2.0 / 3.0,
    "Low": 1.0 / 3.0,
    "None": 0.0,
}

_LN19 = math.log(19.0)  # spread between the 5% and 95% logistic quantiles


def labeller_confidence_score(level: str) -> float:
    try:
        return LABELLER_CONFIDENCE_SCORES[level]
    except KeyError:
        raise ValueError(f"unknown confidence level {level!r}")


def model_confidence(per_class_mean_error) -> float:
    """Gap between the two smallest per-class mean errors."""
    errors = np.asarray(per_class_mean_error, dtype=np.float64)
    if errors.size < 2:
        raise ValueError("need at least two classes")
    two = np.partition(errors, 1)[:2]
    return float(two[1] - two[0])


def normalize_confidences(raws) -> np.ndarray:
    """Divide by the set maximum, mapping scores into [0, 1].

    All-zero input returns all zeros and emits a warning.
    """
    raws = np.asarray(raws, dtype=np.float64)
    peak = raws.max() if raws.size else 0.0
    if peak <= 0.0:
        warnings.warn("all raw confidences are zero; returning zeros")
        return np.zeros_like(raws)
    return raws / peak


@dataclass(frozen=True)
class PsychometricParams:
    m: float
    w: float
    gamma: float
    lapse: float

    def __post_init__(self):
        if self.w <= 0:
            raise ValueError("width must be positive")
        if self.gamma < 0 or self.lapse < 0 or self.gamma + self.lapse >= 1:
            raise ValueError("need gamma, lambda >= 0 and gamma + lambda < 1")


def sigmoid_s(x, m: float, w: float):
    """Logistic scaled so S(m)=0.5 and S spans 0.05..0.95 over width w."""
    s = w / (2.0 * _LN19)
    return expit((np.asarray(x, dtype=np.float64) - m) / s)


def psychometric_value(x, p: PsychometricParams):
    """Probability correct at confidence x."""
    return p.gamma + (1.0 - p.gamma - p.lapse) * sigmoid_s(x, p.m, p.w)


def threshold_at(p: PsychometricParams, level: float = 0.8) -> float:
    """Stimulus level where the unscaled sigmoid S reaches `level`."""
    s = p.w / (2.0 * _LN19)
    return p.m + s * math.log(level / (1.0 - level))


@dataclass(frozen=True)
class PerformanceBin:
    center: float
    n_trials: int
    n_correct: int


def bin_performance(confidences, correct, n_bins: int) -> list[PerformanceBin]:
    """Aggregate trials into equal-width bins over [0, 1]; empty bins omitted."""
    confidences = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    if len(confidences) != len(correct):
        raise ValueError("confidences and correct flags differ in length")
    if n_bins < 2:
        raise ValueError("need at least 2 bins")
    idx = np.minimum((confidences * n_bins).astype(int), n_bins - 1)
    bins = []
    for b in range(n_bins):
        mask = idx == b
        n = int(mask.sum())
        if n == 0:
            continue
        bins.append(
            PerformanceBin(
                center=(b + 0.5) / n_bins,
                n_trials=n,
                n_correct=int(correct[mask].sum()),
            )
        )
    return bins


@dataclass(frozen=True)
class PriorSpec:
    """Grid and prior settings; ranges default to data-derived values."""

    grid_shape: tuple[int, int, int] = (60, 60, 30)
    lambda_beta: tuple[float, float] = (1.0, 10.0)
    lambda_max: float = 0.5
    m_range: tuple[float, float] | None = None
    w_spacing: float | None = None


@dataclass
class PsychometricPosterior:
    m_grid: np.ndarray
    w_grid: np.ndarray
    lambda_grid: np.ndarray
    posterior: np.ndarray  # (Nm, Nw, Nl), sums to 1
    prior: np.ndarray  # same shape, sums to 1
    marginals: dict[str, np.ndarray]
    ci95: dict[str, tuple[float, float]]
    map_estimate: PsychometricParams
    gamma: float
    flags: list[str]

    def kl_from_prior(self) -> float:
        """KL(posterior || prior) over the grid."""
        p = self.posterior.ravel()
        q = self.prior.ravel()
        mask = p > 0
        return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def _raised_cosine_edges(x: np.ndarray, lo: float, hi: float, fall: float) -> np.ndarray:
    """1 on [lo, hi], raised-cosine falloff to 0 over `fall` on each side."""
    out = np.ones_like(x)
    left = x < lo
    right = x > hi
    if fall > 0:
        d = np.clip((lo - x[left]) / fall, 0.0, 1.0)
        out[left] = 0.5 * (1.0 + np.cos(math.pi * d))
        d = np.clip((x[right] - hi) / fall, 0.0, 1.0)
        out[right] = 0.5 * (1.0 + np.cos(math.pi * d))
    else:
        out[left | right] = 0.0
    return out


def _equal_tail_ci(grid: np.ndarray, marginal: np.ndarray, level: float = 0.95):
    cdf = np.cumsum(marginal)
    cdf /= cdf[-1]
    lo_q, hi_q = (1 - level) / 2, 1 - (1 - level) / 2
    lo = float(np.interp(lo_q, cdf, grid))
    hi = float(np.interp(hi_q, cdf, grid))
    return lo, hi


class _PriorSupport:
    """Analytic prior densities derived from the stimulus layout."""

    def __init__(self, lo: float, hi: float, spacing: float, priors: PriorSpec):
        self.lo, self.hi, self.spacing = lo, hi, spacing
        self.span = hi - lo
        self.priors = priors
        self.m_bounds = (lo - self.span / 2, hi + self.span / 2)
        self.w_bounds = (spacing, 3 * self.span)
        self.l_bounds = (0.0, priors.lambda_max)

    def m_density(self, m: np.ndarray) -> np.ndarray:
        return _raised_cosine_edges(m, self.lo, self.hi, self.span / 2)

    def w_density(self, w: np.ndarray) -> np.ndarray:
        # uniform core [2*spacing, span], cosine rise from spacing and
        # fall to zero at 3*span
        out = np.ones_like(w)
        left = w < 2 * self.spacing
        d = np.clip((2 * self.spacing - w[left]) / self.spacing, 0.0, 1.0)
        out[left] = 0.5 * (1.0 + np.cos(math.pi * d))
        right = w > self.span
        d = np.clip((w[right] - self.span) / (2 * self.span), 0.0, 1.0)
        out[right] = 0.5 * (1.0 + np.cos(math.pi * d))
        out[w < self.spacing] = 0.0
        out[w > 3 * self.span] = 0.0
        return out

    def l_density(self, lam: np.ndarray) -> np.ndarray:
        a, b = self.priors.lambda_beta
        return lam ** (a - 1.0) * (1.0 - lam) ** (b - 1.0)


def _grid_pass(
    occupied: list[PerformanceBin],
    gamma_fixed: float,
    support: _PriorSupport,
    m_grid: np.ndarray,
    w_grid: np.ndarray,
    l_grid: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior and prior (both normalized to sum 1) on the given axes."""
    prior = (
        support.m_density(m_grid)[:, None, None]
        * support.w_density(w_grid)[None, :, None]
        * support.l_density(l_grid)[None, None, :]
    )
    prior_sum = prior.sum()
    if prior_sum <= 0:
        raise ValueError("prior has no mass on the grid")
    prior = prior / prior_sum

    M = m_grid[:, None, None]
    S_SCALE = w_grid[None, :, None] / (2.0 * _LN19)
    L = l_grid[None, None, :]
    loglik = np.zeros((len(m_grid), len(w_grid), len(l_grid)))
    for b in occupied:
        s_val = expit((b.center - M) / S_SCALE)
        psi = gamma_fixed + (1.0 - gamma_fixed - L) * s_val
        psi = np.clip(psi, 1e-12, 1.0 - 1e-12)
        loglik += b.n_correct * np.log(psi) + (b.n_trials - b.n_correct) * np.log1p(
            -psi
        )

    log_post = loglik + np.log(np.where(prior > 0, prior, 1e-300))
    log_post -= log_post.max()
    posterior = np.exp(log_post)
    posterior[prior == 0] = 0.0
    posterior /= posterior.sum()
    return posterior, prior


def _refined_axis(
    grid: np.ndarray, marginal: np.ndarray, bounds: tuple[float, float], n: int
) -> np.ndarray:
    """Zoom the axis onto the posterior mass (mean +- 8 sd, clipped)."""
    mean = float(np.sum(grid * marginal))
    sd = math.sqrt(max(float(np.sum((grid - mean) ** 2 * marginal)), 1e-300))
    pad = max(8.0 * sd, 2.0 * (grid[1] - grid[0]))
    lo = max(bounds[0], mean - pad)
    hi = min(bounds[1], mean + pad)
    if hi <= lo:
        return grid
    return np.linspace(lo, hi, n)


def fit_psychometric(
    binned: list[PerformanceBin],
    gamma_fixed: float,
    priors: PriorSpec | None = None,
) -> PsychometricPosterior:
    """Grid posterior over (m, w, lambda) with gamma fixed.

    Priors: threshold uniform over the data range with raised-cosine
    falloff over half the range on each side; width uniform between
    twice the minimal stimulus spacing and the range, with falloff to
    the minimal spacing and to three times the range; lapse Beta(1,10).
    A coarse pass over the full prior support locates the mass; a second
    pass re-grids onto it so concentrated posteriors stay resolved.
    Bins with zero trials contribute nothing, so a fit with no trials at
    all returns the prior itself (flagged "no_data").
    """
    priors = priors or PriorSpec()
    if len(binned) < 2:
        raise ValueError("need at least 2 bins")
    # accumulation order must not matter
    binned = sorted(binned, key=lambda b: (b.center, b.n_trials, b.n_correct))
    occupied = [b for b in binned if b.n_trials > 0]
    flags: list[str] = []
    if not occupied:
        flags.append("no_data")
    elif len(occupied) < 2:
        raise ValueError("need at least 2 occupied bins")

    xs = np.array([b.center for b in binned])
    lo, hi = float(xs.min()), float(xs.max())
    if priors.m_range is not None:
        lo, hi = priors.m_range
    if hi - lo <= 0:
        raise ValueError("bin centers are degenerate")
    spacing = priors.w_spacing
    if spacing is None:
        spacing = float(np.diff(np.sort(np.unique(xs))).min())
    support = _PriorSupport(lo, hi, spacing, priors)

    n_m, n_w, n_l = priors.grid_shape
    m_grid = np.linspace(*support.m_bounds, n_m)
    w_grid = np.linspace(*support.w_bounds, n_w)
    l_grid = np.linspace(*support.l_bounds, n_l)
    posterior, prior = _grid_pass(
        occupied, gamma_fixed, support, m_grid, w_grid, l_grid
    )

    if occupied:
        if all(b.n_correct in (0, b.n_trials) for b in occupied):
            flags.append("width_unidentifiable")
        m_grid = _refined_axis(
            m_grid, posterior.sum(axis=(1, 2)), support.m_bounds, n_m
        )
        w_grid = _refined_axis(
            w_grid, posterior.sum(axis=(0, 2)), support.w_bounds, n_w
        )
        l_grid = _refined_axis(
            l_grid, posterior.sum(axis=(0, 1)), support.l_bounds, n_l
        )
        posterior, prior = _grid_pass(
            occupied, gamma_fixed, support, m_grid, w_grid, l_grid
        )

    marg = {
        "m": posterior.sum(axis=(1, 2)),
        "w": posterior.sum(axis=(0, 2)),
        "lambda": posterior.sum(axis=(0, 1)),
    }
    ci95 = {
        "m": _equal_tail_ci(m_grid, marg["m"]),
        "w": _equal_tail_ci(w_grid, marg["w"]),
        "lambda": _equal_tail_ci(l_grid, marg["lambda"]),
    }
    im, iw, il = np.unravel_index(int(posterior.argmax()), posterior.shape)
    map_estimate = PsychometricParams(
        m=float(m_grid[im]),
        w=float(w_grid[iw]),
        gamma=gamma_fixed,
        lapse=float(l_grid[il]),
    )

    return PsychometricPosterior(
        m_grid=m_grid,
        w_grid=w_grid,
        lambda_grid=l_grid,
        posterior=posterior,
        prior=prior,
        marginals=marg,
        ci95=ci95,
        map_estimate=map_estimate,
        gamma=gamma_fixed,
        flags=flags,
    )
