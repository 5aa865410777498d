"""Variance schedules for the forward noising process.

A schedule holds the per-step retention factors alpha_t in (0, 1) and
their cumulative products alpha_bar_t.  Timesteps are 1-based: t runs
from 1 to T, matching the convention that t=0 is clean data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    """Raised for invalid schedule parameters."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable variance schedule.

    alpha[t-1] is alpha_t and alpha_bar[t-1] is the cumulative product
    of alpha_1..alpha_t.  Both arrays have length T.
    """

    kind: str
    params: dict = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return len(self.alpha)

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [1, {self.T}]")

    def alpha_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def to_config(self) -> dict:
        return {"T": self.T, "kind": self.kind, "params": dict(self.params)}


def _linear_beta_alphas(T: int, beta_start: float, beta_end: float) -> np.ndarray:
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return 1.0 - betas


def _cosine_alphas(T: int, s: float) -> np.ndarray:
    # Squared-cosine alpha_bar curve; alphas recovered from consecutive
    # ratios so the cumulative-product identity holds by construction.
    grid = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((grid + s) / (1.0 + s) * math.pi / 2.0) ** 2
    bar = f / f[0]
    alphas = bar[1:] / bar[:-1]
    return np.clip(alphas, 1e-8, 1.0 - 1e-8)


def build_schedule(T: int, kind: str = "linear_beta", **params) -> NoiseSchedule:
    """Build a validated schedule.

    Supported kinds:
      linear_beta(beta_start=1e-4, beta_end=0.02)
      cosine(s=0.008)
      constant_alpha(alpha)
    """
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")

    if kind == "linear_beta":
        beta_start = float(params.pop("beta_start", 1e-4))
        beta_end = float(params.pop("beta_end", 0.02))
        alphas = _linear_beta_alphas(T, beta_start, beta_end)
        used = {"beta_start": beta_start, "beta_end": beta_end}
    elif kind == "cosine":
        s = float(params.pop("s", 0.008))
        alphas = _cosine_alphas(T, s)
        used = {"s": s}
    elif kind == "constant_alpha":
        if "alpha" not in params:
            raise ScheduleError("constant_alpha requires an 'alpha' parameter")
        a = float(params.pop("alpha"))
        alphas = np.full(T, a, dtype=np.float64)
        used = {"alpha": a}
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if params:
        raise ScheduleError(f"unexpected parameters for {kind}: {sorted(params)}")

    if np.any(alphas <= 0.0) or np.any(alphas >= 1.0):
        raise ScheduleError(f"{kind} parameters give alpha outside (0, 1)")

    alpha_bar = np.cumprod(alphas)
    if np.any(alpha_bar >= 1.0):
        raise ScheduleError("alpha_bar reaches 1; SNR would be undefined")
    if np.any(np.diff(alpha_bar) >= 0.0):
        raise ScheduleError("alpha_bar is not strictly decreasing")

    return NoiseSchedule(kind=kind, params=used, alpha=alphas, alpha_bar=alpha_bar)


def schedule_from_config(config: dict) -> NoiseSchedule:
    return build_schedule(int(config["T"]), config["kind"], **config.get("params", {}))


def snr(t: int, schedule: NoiseSchedule) -> float:
    """Signal-to-noise ratio alpha_bar_t / (1 - alpha_bar_t)."""
    a_bar = schedule.alpha_bar_at(t)
    return a_bar / (1.0 - a_bar)


def training_weight(t: int, schedule: NoiseSchedule) -> float:
    """Loss weight min{5/SNR(t), 1}."""
    return min(5.0 / snr(t, schedule), 1.0)
