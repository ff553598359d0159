import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdds.safety import (EmergencyConfig, ThresholdBell, bell_check, bell_rearm, detect_emergency,
                         project_lag)
from pdds.signal import VoltageBuffer, VoltageReading, glucose_to_voltage

from . import oracles


def _buf(volts, cadence=5.0):
    b = VoltageBuffer()
    for i, v in enumerate(volts):
        b.push(VoltageReading(i * cadence, v))
    return b


def test_project_lag_examples():
    assert project_lag(0.5, 0.0, 15) == 0.5
    assert project_lag(0.5, -0.01, 15) == pytest.approx(0.35, abs=1e-12)


def test_projection_crosses_before_raw():
    hypo = glucose_to_voltage(70)
    v = 0.25
    assert v > hypo
    assert project_lag(v, -0.01, 15) < hypo


@given(st.floats(0, 3), st.floats(-2, 2), st.floats(0.1, 60), st.floats(0.1, 4))
def test_project_lag_linear_in_lag(v, s, t, lam):
    assert project_lag(v, s, lam * t) - v == pytest.approx(lam * (project_lag(v, s, t) - v), abs=1e-12)


@pytest.mark.parametrize("kw", [dict(lag_minutes=0), dict(slope_threshold=0.0), dict(window=1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        EmergencyConfig(**kw)


def test_constant_buffer_is_not_emergency():
    v = detect_emergency(_buf([0.5] * 10))
    assert not v.is_emergency and v.slope == 0.0 and v.projected_v == 0.5


def test_slow_descent_is_not_emergency():
    v = detect_emergency(_buf([1.0 - 0.05 * i for i in range(10)]))
    assert v.slope == pytest.approx(-0.01, abs=1e-12)
    assert not v.is_emergency


def test_fast_crash_is_emergency():
    v = detect_emergency(_buf([3.0, 1.5, 0.0], cadence=1.0))
    assert v.slope == pytest.approx(-1.5, abs=1e-12)
    assert v.is_emergency
    assert v.projected_v == pytest.approx(0.0 - 1.5 * 15, abs=1e-9)


def test_short_buffers_never_raise():
    assert detect_emergency(VoltageBuffer()).is_emergency is False
    one = detect_emergency(_buf([0.1]))
    assert (one.is_emergency, one.slope, one.projected_v) == (False, 0.0, 0.1)


def test_threshold_boundary_is_inclusive():
    # slope exactly at the threshold counts as an emergency
    v = detect_emergency(_buf([0.5, 0.25], cadence=1.0))
    assert v.slope == -0.25 and v.is_emergency


@given(st.floats(-2, 0), st.floats(-2, 0))
def test_emergency_monotone_in_slope(s1, s2):
    lo, hi = min(s1, s2), max(s1, s2)
    cfg = EmergencyConfig()
    if hi <= cfg.slope_threshold:
        assert lo <= cfg.slope_threshold


def test_bell_epsilon_guard():
    b = ThresholdBell()
    assert b.threshold == pytest.approx(1.3)
    assert not bell_check(b, 1.3 + 1e-12)
    assert b.armed


def test_bell_fires_then_disarms():
    b = ThresholdBell()
    assert bell_check(b, 1.4)
    assert not b.armed
    assert not bell_check(b, 1.45)


@pytest.mark.parametrize("v,slope,expected", [(0.6, 0.2, 0.8), (0.6, 1.0, 0.9), (0.6, 0.0, 0.7)])
def test_rearm_examples(v, slope, expected):
    b = ThresholdBell()
    assert bell_rearm(b, v, slope) == pytest.approx(expected, abs=1e-12)


@given(st.floats(-5, 5))
def test_increment_bounds(slope):
    b = ThresholdBell()
    assert b.tau_base <= b.increment(slope) <= b.delta_max


def test_rearm_after_recovery_below_raised_threshold():
    b = ThresholdBell()
    assert b.check(1.4)
    b.rearm(1.4, 0.0)               # threshold 1.5
    assert not b.check(1.45)         # 1.45 < 1.5: re-arms, does not fire
    assert b.armed
    assert b.check(1.55)


def test_recovery_below_base_restores_base_threshold():
    b = ThresholdBell()
    b.check(1.6)
    b.rearm(1.6, 0.0)
    b.check(1.0)
    assert b.threshold == b.base_threshold and b.armed
    assert b.check(1.35)


def test_rearm_is_capped_at_rail():
    b = ThresholdBell()
    assert b.rearm(3.0, 1.0) == 3.3


def _random_sequence(rng, n):
    v = rng.uniform(0.8, 1.8)
    out = []
    for _ in range(n):
        v = float(np.clip(v + rng.normal(0, 0.08), 0.0, 3.0))
        if rng.random() < 0.02:
            v = 1.3 + rng.choice([-1e-12, 0.0, 1e-12, 2e-9])  # probe the guard band
        out.append(v)
    return out


def test_bell_matches_oracle_and_fires_once_per_edge():
    rng = np.random.default_rng(123)
    for _ in range(300):
        seq = _random_sequence(rng, int(rng.integers(1, 300)))
        slopes = rng.normal(0, 0.05, len(seq))
        bell, ref = ThresholdBell(), oracles.BellOracle()
        rearmed_since_fire = True
        for v, s in zip(seq, slopes):
            thr_before, armed_before = bell.threshold, bell.armed
            fired = bell.check(v)
            if fired:
                bell.rearm(v, float(s))
            assert fired == ref.feed(v, float(s))
            assert bell.threshold == ref.thr and bell.armed == ref.armed
            if fired:
                assert armed_before and v > thr_before + bell.epsilon
                assert rearmed_since_fire
                rearmed_since_fire = False
            elif bell.armed:
                rearmed_since_fire = True
