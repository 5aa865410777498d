import numpy as np
import pytest

from genclass.diffusion.schedule import (
    ScheduleError,
    build_schedule,
    schedule_from_config,
    snr,
    training_weight,
)

# Cumulative product of (1 - beta_t) for the linear schedule
# beta in [1e-4, 0.02], T=1000, computed at 60 decimal digits.
ALPHA_BAR_1000_LINEAR = 4.0358297653756833148e-5


def test_single_step_constant_alpha():
    s = build_schedule(1, "constant_alpha", alpha=0.9)
    assert s.T == 1
    assert s.alpha_bar_at(1) == pytest.approx(0.9, abs=0)


def test_two_step_product_law():
    s = build_schedule(2, "constant_alpha", alpha=0.5)
    assert np.allclose(s.alpha_bar, [0.5, 0.25])


def test_linear_beta_final_value_matches_high_precision_oracle():
    s = build_schedule(1000, "linear_beta", beta_start=1e-4, beta_end=0.02)
    assert s.alpha_bar_at(1000) == pytest.approx(ALPHA_BAR_1000_LINEAR, rel=1e-9)
    assert np.all(np.diff(s.alpha_bar) < 0)


@pytest.mark.parametrize("kind,params", [
    ("linear_beta", {}),
    ("cosine", {}),
    ("constant_alpha", {"alpha": 0.7}),
])
def test_invariants_all_kinds(kind, params):
    s = build_schedule(500, kind, **params)
    assert np.all(s.alpha > 0) and np.all(s.alpha < 1)
    # product identity within 1e-12 relative
    assert np.allclose(s.alpha_bar, np.cumprod(s.alpha), rtol=1e-12, atol=0)
    assert np.all(np.diff(s.alpha_bar) < 0)


def test_rejects_bad_parameters():
    with pytest.raises(ScheduleError):
        build_schedule(0, "linear_beta")
    with pytest.raises(ScheduleError):
        build_schedule(10, "constant_alpha", alpha=1.0)
    with pytest.raises(ScheduleError):
        build_schedule(10, "constant_alpha", alpha=0.0)
    with pytest.raises(ScheduleError):
        build_schedule(10, "linear_beta", beta_start=-0.5, beta_end=0.5)
    with pytest.raises(ScheduleError):
        build_schedule(10, "unknown_kind")
    with pytest.raises(ScheduleError):
        build_schedule(10, "linear_beta", bogus=1)


def test_timestep_bounds():
    s = build_schedule(10, "constant_alpha", alpha=0.9)
    with pytest.raises(ScheduleError):
        s.alpha_at(0)
    with pytest.raises(ScheduleError):
        s.alpha_bar_at(11)


def test_snr_values():
    s = build_schedule(1, "constant_alpha", alpha=0.5)
    assert snr(1, s) == pytest.approx(1.0)
    s = build_schedule(1, "constant_alpha", alpha=0.8)
    assert snr(1, s) == pytest.approx(4.0)
    s = build_schedule(1, "constant_alpha", alpha=0.99)
    assert snr(1, s) == pytest.approx(99.0, rel=1e-12)


def test_training_weight_clamp():
    # snr = 5 -> exactly at the clamp boundary
    s = build_schedule(1, "constant_alpha", alpha=5.0 / 6.0)
    assert training_weight(1, s) == pytest.approx(1.0)
    # snr = 50 -> 0.1
    s = build_schedule(1, "constant_alpha", alpha=50.0 / 51.0)
    assert training_weight(1, s) == pytest.approx(0.1, rel=1e-9)
    # snr = 0.5 -> clamped at 1
    s = build_schedule(1, "constant_alpha", alpha=1.0 / 3.0)
    assert training_weight(1, s) == pytest.approx(1.0)


def test_config_round_trip():
    s = build_schedule(64, "cosine", s=0.01)
    s2 = schedule_from_config(s.to_config())
    assert np.array_equal(s.alpha_bar, s2.alpha_bar)
    assert s2.kind == "cosine"
