"""Emergency descent detection and the edge-triggered threshold bell."""
from __future__ import annotations

from dataclasses import dataclass

from .signal import VoltageBuffer, glucose_to_voltage, lsq_slope


@dataclass(frozen=True)
class EmergencyConfig:
    lag_minutes: float = 15.0
    slope_threshold: float = -0.25  # V/min
    window: int = 10

    def __post_init__(self):
        if self.lag_minutes <= 0:
            raise ValueError("lag_minutes must be positive")
        if self.slope_threshold >= 0:
            raise ValueError("slope_threshold must be negative")
        if self.window < 2:
            raise ValueError("window must be >= 2")


@dataclass(frozen=True)
class EmergencyVerdict:
    is_emergency: bool
    slope: float
    projected_v: float


def project_lag(v_cur: float, slope: float, lag: float) -> float:
    """Estimated blood-side voltage ``lag`` minutes ahead of the sensor.

    Not clipped: the result is a risk estimate, not a sensor value.
    """
    return v_cur + slope * lag


def detect_emergency(buf: VoltageBuffer, cfg: EmergencyConfig = EmergencyConfig()) -> EmergencyVerdict:
    """Check the most recent window for a dangerous descent.

    Never raises. With fewer than two readings there is no slope evidence and
    the verdict is non-emergency with slope 0.
    """
    last = buf.last
    if last is None:
        return EmergencyVerdict(False, 0.0, 0.0)
    slope = lsq_slope(buf, cfg.window)
    if slope is None:
        return EmergencyVerdict(False, 0.0, last.v)
    return EmergencyVerdict(
        is_emergency=slope <= cfg.slope_threshold,
        slope=slope,
        projected_v=project_lag(last.v, slope, cfg.lag_minutes),
    )


class ThresholdBell:
    """Rising-edge comparator with an epsilon guard and slope-scaled re-arm.

    After a fire the threshold is raised (``rearm``) and the bell stays
    disarmed until a reading drops below ``threshold - epsilon``. A reading
    below ``base_threshold - epsilon`` also restores the base threshold, so
    the bell does not ratchet upward forever across separate excursions.
    """

    def __init__(self, threshold: float = glucose_to_voltage(180.0), epsilon: float = 1e-9,
                 tau_base: float = 0.1, alpha: float = 0.5, delta_max: float = 0.3):
        if not (0.0 <= threshold <= 3.3):
            raise ValueError("threshold must lie in [0, 3.3] V")
        self.base_threshold = threshold
        self.threshold = threshold
        self.epsilon = epsilon
        self.tau_base = tau_base
        self.alpha = alpha
        self.delta_max = delta_max
        self.armed = True
        self.fire_count = 0

    def check(self, v_cur: float) -> bool:
        if self.armed:
            if v_cur > self.threshold + self.epsilon:
                self.armed = False
                self.fire_count += 1
                return True
            return False
        if v_cur < self.threshold - self.epsilon:
            self.armed = True
        if v_cur < self.base_threshold - self.epsilon:
            self.threshold = self.base_threshold
            self.armed = True
        return False

    def increment(self, slope: float) -> float:
        return min(self.tau_base + self.alpha * abs(slope), self.delta_max)

    def rearm(self, v_cur: float, slope: float) -> float:
        """Raise the threshold above the current reading after a fire."""
        self.threshold = min(v_cur + self.increment(slope), 3.3)
        return self.threshold

    def snapshot(self) -> dict:
        return {"threshold": self.threshold, "armed": self.armed,
                "base_threshold": self.base_threshold, "fires": self.fire_count}


def bell_check(bell: ThresholdBell, v_cur: float) -> bool:
    return bell.check(v_cur)


def bell_rearm(bell: ThresholdBell, v_cur: float, slope: float) -> float:
    return bell.rearm(v_cur, slope)
