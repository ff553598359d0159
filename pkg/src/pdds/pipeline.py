"""Per-reading orchestration: emergency check, threshold bell, classification, dose or notify."""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .baselines import rule_assess
from .dataset import WINDOW, extract_features_batch
from .dosing import DoseConfig, compute_dose
from .safety import EmergencyConfig, ThresholdBell, detect_emergency
from .signal import VoltageBuffer, VoltageReading, Trace, lsq_slope, ols_slope, voltage_to_glucose
from .snn import EncoderConfig, SpikingNet, encode_batch, forward
from .sync import CloudClient, SyncOutcome, SyncQueue, sync

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    DIABETIC = "diabetic"
    PREDIABETIC = "prediabetic"


class Tier(str, enum.Enum):
    NUDGE = "NUDGE"
    ALERT = "ALERT"
    URGENT = "URGENT"


TIER_BY_SEVERITY = (Tier.NUDGE, Tier.ALERT, Tier.URGENT)


# --- events -------------------------------------------------------------------

@dataclass(frozen=True)
class EmergencyAlert:
    slope: float
    projected_v: float
    kind: str = field(default="EmergencyAlert", init=False)


@dataclass(frozen=True)
class BellWake:
    v: float
    new_threshold: float
    kind: str = field(default="BellWake", init=False)


@dataclass(frozen=True)
class Classified:
    severity: int
    counts: tuple[int, ...] | None  # None when the rule fallback decided
    fallback: bool = False
    kind: str = field(default="Classified", init=False)


@dataclass(frozen=True)
class Injection:
    units: float
    excess: float = 0.0
    gate: float = 0.0
    capped: bool = False
    kind: str = field(default="Injection", init=False)


@dataclass(frozen=True)
class Notification:
    tier: Tier
    severity: int
    kind: str = field(default="Notification", init=False)


@dataclass(frozen=True)
class NoOp:
    kind: str = field(default="NoOp", init=False)


PipelineEvent = EmergencyAlert | BellWake | Classified | Injection | Notification | NoOp


def event_dict(ev: PipelineEvent, t: float | None = None) -> dict:
    d = asdict(ev)
    if "tier" in d:
        d["tier"] = d["tier"].value
    if d.get("counts") is not None:
        d["counts"] = list(d["counts"])
    if t is not None:
        d = {"t": t, **d}
    return d


# --- classifiers --------------------------------------------------------------

class Classifier(Protocol):
    def __call__(self, window: Sequence[VoltageReading]) -> tuple[int, tuple[int, ...]]: ...


def window_features(window: Sequence[VoltageReading]) -> np.ndarray:
    g = np.array([voltage_to_glucose(r.v) for r in window])
    t = np.array([r.t for r in window])
    return extract_features_batch(g[None], t[None])[0]


class SnnClassifier:
    """Wraps a trained net; each call draws a fresh encoding from its own stream."""

    def __init__(self, net: SpikingNet, enc: EncoderConfig = EncoderConfig(), seed: int = 0):
        self.net = net
        self.enc = enc
        self.rng = np.random.default_rng(seed)
        self.calls = 0

    def __call__(self, window: Sequence[VoltageReading]) -> tuple[int, tuple[int, ...]]:
        self.calls += 1
        spikes = encode_batch(window_features(window)[None], self.enc, self.rng)[0]
        res = forward(self.net, spikes)
        return res.severity, tuple(int(c) for c in res.counts)


class FixedClassifier:
    """Always answers the same severity; used to isolate the dose path."""

    def __init__(self, severity: int):
        if severity not in (0, 1, 2):
            raise ValueError("severity must be 0, 1 or 2")
        self.severity = severity
        self.calls = 0

    def __call__(self, window):
        self.calls += 1
        counts = [0, 0, 0]
        counts[self.severity] = 1
        return self.severity, tuple(counts)


class RuleClassifier:
    def __init__(self):
        self.calls = 0

    def __call__(self, window):
        self.calls += 1
        return rule_fallback(window), (0, 0, 0)


def rule_fallback(window: Sequence[VoltageReading]) -> int:
    last = voltage_to_glucose(window[-1].v)
    slope = 0.0
    if len(window) >= 2:
        slope = ols_slope([r.t for r in window], [voltage_to_glucose(r.v) for r in window])
    return rule_assess(last, slope)


# --- telemetry ------------------------------------------------------------------

class CountingSink:
    """Telemetry sink that records every call it receives."""

    def __init__(self):
        self.calls = 0
        self.records: list[dict] = []

    def __call__(self, record: dict) -> None:
        self.calls += 1
        self.records.append(record)


@dataclass
class Telemetry:
    enabled: bool = False
    sink: Callable[[dict], None] | None = None

    def emit(self, record: dict) -> None:
        if not self.enabled or self.sink is None:
            return
        self.sink(record)


# --- the orchestrator -----------------------------------------------------------

@dataclass
class PipelineStats:
    readings: int = 0
    emergencies: int = 0
    wakes: int = 0
    classifications: int = 0
    fallbacks: int = 0
    injections: int = 0
    notifications: int = 0
    syncs: int = 0

    @property
    def activation_ratio(self) -> float:
        return self.classifications / self.readings if self.readings else 0.0


class Pipeline:
    """Single-threaded event loop over sensor readings.

    Sync is attempted after every bell wake and at the end of a run, always
    between readings, so an upload never delays the safety checks.
    """

    def __init__(self, classifier: Classifier | None = None, mode: Mode = Mode.DIABETIC,
                 bell: ThresholdBell | None = None, emergency: EmergencyConfig = EmergencyConfig(),
                 dose: DoseConfig = DoseConfig(), buffer: VoltageBuffer | None = None,
                 queue: SyncQueue | None = None, cloud: CloudClient | None = None,
                 telemetry: Telemetry | None = None, window: int = WINDOW):
        self.classifier = classifier if classifier is not None else RuleClassifier()
        self.mode = Mode(mode)
        self.bell = bell if bell is not None else ThresholdBell()
        self.emergency = emergency
        self.dose = dose
        self.buffer = buffer if buffer is not None else VoltageBuffer()
        self.queue = queue if queue is not None else SyncQueue()
        self.cloud = cloud
        self.telemetry = telemetry if telemetry is not None else Telemetry()
        self.window = window
        self.stats = PipelineStats()
        self.sync_log: list[SyncOutcome] = []

    # one reading -----------------------------------------------------------------
    def on_voltage(self, t: float, v: float) -> list[PipelineEvent]:
        return self.on_reading(VoltageReading(float(t), float(v)))

    def on_reading(self, reading: VoltageReading) -> list[PipelineEvent]:
        self.buffer.push(reading)
        self.stats.readings += 1
        verdict = detect_emergency(self.buffer, self.emergency)
        if verdict.is_emergency:
            self.stats.emergencies += 1
            events = [EmergencyAlert(verdict.slope, verdict.projected_v),
                      Notification(Tier.URGENT, 2)]
            self.stats.notifications += 1
            return self._record(reading, events)
        if not self.bell.check(reading.v):
            return [NoOp()]
        self.stats.wakes += 1
        slope = lsq_slope(self.buffer, self.emergency.window) or 0.0
        severity, counts, fallback = self._classify()
        events: list[PipelineEvent] = []
        effect = self.severity_to_dose_effect(severity, reading.v, slope)
        new_thr = self.bell.rearm(reading.v, slope)
        events.append(BellWake(reading.v, new_thr))
        events.append(Classified(severity, counts, fallback))
        if effect is not None:
            events.append(effect)
            self.stats.injections += 1
        else:
            events.append(Notification(TIER_BY_SEVERITY[severity], severity))
            self.stats.notifications += 1
        out = self._record(reading, events)
        self.try_sync()
        return out

    def _classify(self) -> tuple[int, tuple[int, ...] | None, bool]:
        window = self.buffer.recent(self.window)
        if len(window) < self.window:
            log.info("short window (%d readings): rule fallback", len(window))
            self.stats.fallbacks += 1
            return rule_fallback(window), None, True
        self.stats.classifications += 1
        severity, counts = self.classifier(window)
        return severity, counts, False

    def severity_to_dose_effect(self, severity: int, v: float, slope: float) -> Injection | None:
        """Injection in DIABETIC mode; in PREDIABETIC the dose is computed and dropped."""
        res = compute_dose(v, slope, severity, self.dose)
        if self.mode is Mode.PREDIABETIC:
            return None
        return Injection(res.units, res.excess, res.sigmoid_gate, res.capped)

    def _record(self, reading: VoltageReading, events: list[PipelineEvent]) -> list[PipelineEvent]:
        for ev in events:
            rec = event_dict(ev, reading.t)
            self.queue.append(rec)
            self.telemetry.emit(rec)
        return events

    # sync --------------------------------------------------------------------------
    def try_sync(self) -> SyncOutcome | None:
        if self.cloud is None:
            return None
        out = sync(self.queue, self.cloud)
        self.stats.syncs += 1
        self.sync_log.append(out)
        return out

    # whole runs --------------------------------------------------------------------
    def run(self, readings: Iterable[VoltageReading],
            on_event: Callable[[float, PipelineEvent], None] | None = None) -> list[tuple[float, PipelineEvent]]:
        out = []
        for r in readings:
            for ev in self.on_reading(r):
                out.append((r.t, ev))
                if on_event:
                    on_event(r.t, ev)
        self.try_sync()
        return out


def trace_readings(trace: Trace) -> list[VoltageReading]:
    return [VoltageReading.from_glucose(t, g) for t, g in zip(trace.t, trace.glucose)]


def write_run_log(events: Iterable[tuple[float, PipelineEvent]], path: str | Path) -> int:
    n = 0
    with Path(path).open("w") as fh:
        for t, ev in events:
            fh.write(json.dumps(event_dict(ev, t)) + "\n")
            n += 1
    return n
