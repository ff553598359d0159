"""Glucose/voltage conversion, timestamped readings and the sensor ring buffer."""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

V_MIN = 0.0
V_MAX = 3.0
MGDL_PER_VOLT = 100.0
MGDL_AT_ZERO_V = 50.0
DEFAULT_CAPACITY = 60
MGDL_SANITY_MAX = 1000.0


def glucose_to_voltage(g: float) -> float:
    """Map mg/dL onto the 0-3 V internal scale (100 mg/dL -> 0.5 V).

    Readings outside 50-350 mg/dL saturate at the rails.
    """
    g = float(g)
    if not math.isfinite(g) or not (0.0 <= g <= MGDL_SANITY_MAX):
        raise ValueError(f"glucose must be finite and within [0, {MGDL_SANITY_MAX:g}] mg/dL, got {g!r}")
    v = (g - MGDL_AT_ZERO_V) / MGDL_PER_VOLT
    return min(max(v, V_MIN), V_MAX)


def voltage_to_glucose(v: float) -> float:
    v = float(v)
    if not (V_MIN <= v <= V_MAX):
        raise ValueError(f"voltage {v!r} outside [{V_MIN}, {V_MAX}]")
    return MGDL_PER_VOLT * v + MGDL_AT_ZERO_V


@dataclass(frozen=True)
class VoltageReading:
    t: float  # minutes since stream start
    v: float

    def __post_init__(self):
        if not math.isfinite(self.t):
            raise ValueError("timestamp must be finite")
        if not (V_MIN <= self.v <= V_MAX):
            raise ValueError(f"voltage {self.v!r} outside [{V_MIN}, {V_MAX}]")

    @classmethod
    def from_glucose(cls, t: float, g: float) -> "VoltageReading":
        return cls(float(t), glucose_to_voltage(g))


class VoltageBuffer:
    """Fixed-capacity ring of the most recent readings, oldest first.

    Pushing into a full buffer silently drops the oldest entry.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._ring: deque[VoltageReading] = deque(maxlen=capacity)

    def push(self, r: VoltageReading) -> "VoltageBuffer":
        if self._ring and r.t <= self._ring[-1].t:
            raise ValueError(
                f"non-monotone timestamp {r.t} after {self._ring[-1].t}")
        self._ring.append(r)
        return self

    def __len__(self) -> int:
        return len(self._ring)

    def __iter__(self) -> Iterator[VoltageReading]:
        return iter(self._ring)

    def __getitem__(self, i: int) -> VoltageReading:
        return self._ring[i]

    @property
    def entries(self) -> list[VoltageReading]:
        return list(self._ring)

    @property
    def last(self) -> VoltageReading | None:
        return self._ring[-1] if self._ring else None

    def recent(self, n: int) -> list[VoltageReading]:
        n = min(n, len(self._ring))
        return [self._ring[i] for i in range(len(self._ring) - n, len(self._ring))]


def ols_slope(t: Sequence[float] | np.ndarray, y: Sequence[float] | np.ndarray) -> float:
    """Ordinary least-squares slope of y against t (centred for stability)."""
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if t.size < 2:
        raise ValueError("need at least two points")
    tc = t - t.mean()
    denom = float(tc @ tc)
    if denom == 0.0:
        raise ValueError("timestamps are all identical")
    return float(tc @ (y - y.mean())) / denom


def lsq_slope(buf: VoltageBuffer | Iterable[VoltageReading], n: int = 10) -> float | None:
    """Slope in V/min over the ``n`` most recent readings.

    Returns None when fewer than two readings are available.
    """
    readings = buf.recent(n) if isinstance(buf, VoltageBuffer) else list(buf)[-n:]
    if len(readings) < 2:
        return None
    return ols_slope([r.t for r in readings], [r.v for r in readings])


@dataclass
class Trace:
    """A CGM stream: timestamps (min), glucose (mg/dL) and optional hypo annotations."""

    t: np.ndarray
    glucose: np.ndarray
    hypo_event: np.ndarray | None = None
    patient: str = "p000"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.glucose = np.asarray(self.glucose, dtype=np.float64)
        if self.t.shape != self.glucose.shape or self.t.ndim != 1:
            raise ValueError("t and glucose must be 1-D arrays of equal length")
        if self.hypo_event is not None:
            self.hypo_event = np.asarray(self.hypo_event, dtype=bool)
            if self.hypo_event.shape != self.t.shape:
                raise ValueError("hypo_event length mismatch")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("timestamps must strictly increase")

    def __len__(self) -> int:
        return self.t.size

    @property
    def hypo(self) -> np.ndarray:
        if self.hypo_event is None:
            return np.zeros(self.t.size, dtype=bool)
        return self.hypo_event


TRACE_HEADER = ("t_min", "glucose_mgdl", "hypo_event")


def read_trace(path: str | Path, patient: str | None = None) -> Trace:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if header[:2] != list(TRACE_HEADER[:2]):
            raise ValueError(f"{path}: expected header t_min,glucose_mgdl[,hypo_event]")
        has_hypo = len(header) > 2 and header[2] == "hypo_event"
        t, g, h = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            t.append(float(row[0]))
            g.append(float(row[1]))
            if has_hypo:
                flag = row[2].strip()
                if flag not in ("0", "1"):
                    raise ValueError(f"{path}:{lineno}: hypo_event must be 0 or 1")
                h.append(flag == "1")
            if len(t) > 1 and t[-1] <= t[-2]:
                raise ValueError(f"{path}:{lineno}: non-monotone t_min")
    return Trace(np.array(t), np.array(g), np.array(h, dtype=bool) if has_hypo else None,
                 patient=patient or path.stem)


def write_trace(trace: Trace, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        if trace.hypo_event is None:
            w.writerow(TRACE_HEADER[:2])
            for t, g in zip(trace.t, trace.glucose):
                w.writerow((repr(float(t)), repr(float(g))))
        else:
            w.writerow(TRACE_HEADER)
            for t, g, h in zip(trace.t, trace.glucose, trace.hypo_event):
                w.writerow((repr(float(t)), repr(float(g)), int(h)))
