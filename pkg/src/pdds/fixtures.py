"""Constructed traces and bundled artefacts shipped with the package."""
from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .signal import Trace, read_trace

DATA_PACKAGE = "pdds.data"
REFERENCE_DAY_CSV = "reference_day.csv"
CRASH_TRACE_CSV = "crash_trace.csv"
DEFAULT_WEIGHTS = "snn_default.bin"
SYNTH_CONFIG = "synth_default.json"
TRAIN_CONFIG = "train_default.json"


def data_path(name: str) -> Path:
    return Path(str(resources.files(DATA_PACKAGE).joinpath(name)))


def reference_day(seed: int = 7) -> Trace:
    """One day at 5-minute cadence: three meals, two of which cross 180 mg/dL."""
    t = np.arange(288) * 5.0
    g = np.full_like(t, 112.0)
    for start, amp in ((7 * 60.0, 55.0), (12.5 * 60.0, 95.0), (19 * 60.0, 80.0)):
        tau = np.clip(t - start, 0.0, None)
        g += amp * (tau / 60.0) * np.exp(1.0 - tau / 60.0)  # peaks one hour after the meal
    g += np.random.default_rng(seed).normal(0.0, 1.5, size=t.size)
    return Trace(t, np.round(g, 3), np.zeros(t.size, dtype=bool), patient="reference_day")


def crash_trace() -> Trace:
    """Flat at 170 mg/dL, a 2 mg/dL/min descent to 45, a hold, then recovery."""
    g = [170.0] * 12
    while g[-1] - 10.0 >= 45.0:
        g.append(g[-1] - 10.0)
    g += [45.0] * 4
    while g[-1] + 10.0 <= 110.0:
        g.append(g[-1] + 10.0)
    g = np.array(g)
    hypo = g < 70.0
    return Trace(np.arange(g.size) * 5.0, g, hypo, patient="crash")


def load_reference_day() -> Trace:
    return read_trace(data_path(REFERENCE_DAY_CSV), patient="reference_day")


def load_crash_trace() -> Trace:
    return read_trace(data_path(CRASH_TRACE_CSV), patient="crash")


def bundled_weights() -> Path | None:
    p = data_path(DEFAULT_WEIGHTS)
    return p if p.exists() else None
