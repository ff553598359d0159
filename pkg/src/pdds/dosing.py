"""Severity-shifted sigmoidal dose calculator with a hard 5.0 U cap."""
from __future__ import annotations

import math
from dataclasses import dataclass

DOSE_CAP_UNITS = 5.0


@dataclass(frozen=True)
class DoseConfig:
    """Dose curve constants. ``cap`` is fixed at 5.0 U and cannot be raised."""

    v_base: float = 0.5
    s_vg: float = 1.0
    d_base: float = 1.0
    lam: float = 2.0
    k: float = 10.0
    m_base: float = 0.5
    delta_m: float = 0.15
    cap: float = DOSE_CAP_UNITS

    def __post_init__(self):
        if self.cap != DOSE_CAP_UNITS:
            raise ValueError("dose cap is fixed at 5.0 U")
        if self.k <= 0:
            raise ValueError("k must be positive")
        if self.delta_m < 0:
            raise ValueError("delta_m must be non-negative")
        if self.d_base <= 0:
            raise ValueError("d_base must be positive")


@dataclass(frozen=True)
class DoseResult:
    units: float
    excess: float
    sigmoid_gate: float
    capped: bool = False


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def compute_dose(v: float, slope: float, severity: int, cfg: DoseConfig = DoseConfig()) -> DoseResult:
    """Insulin units for voltage ``v`` (V), trend ``slope`` (V/min) and severity 0/1/2.

    Only rising trends scale the dose up; a falling slope is treated as flat.
    """
    if severity not in (0, 1, 2):
        raise ValueError(f"severity must be 0, 1 or 2, got {severity!r}")
    if not (math.isfinite(v) and math.isfinite(slope)):
        raise ValueError("v and slope must be finite")
    excess = (v - cfg.v_base) * cfg.s_vg
    d0 = cfg.d_base * excess * (1.0 + cfg.lam * max(0.0, slope))
    m_eff = cfg.m_base - severity * cfg.delta_m
    gate = _sigmoid(cfg.k * (excess - m_eff))
    raw = d0 * gate
    units = min(max(raw, 0.0), cfg.cap)
    return DoseResult(units=units, excess=excess, sigmoid_gate=gate, capped=raw > cfg.cap)
