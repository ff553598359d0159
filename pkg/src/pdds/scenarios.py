"""The 15-scenario functional validation suite, with optional injected faults."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

from .dosing import DOSE_CAP_UNITS
from .pipeline import (BellWake, Classified, CountingSink, EmergencyAlert, FixedClassifier,
                       Injection, Mode, NoOp, Notification, Pipeline, Telemetry, Tier)
from .safety import ThresholdBell
from .signal import VoltageBuffer, glucose_to_voltage
from .sync import Batch, BatchState, SimulatedCloud, SyncQueue, sync

SCENARIO_NAMES = (
    "Threshold exceeded (happy path)",
    "All readings below threshold (no wake)",
    "Re-trigger prevention (epsilon guard)",
    "Second spike after recovery",
    "Steady gradual incline",
    "Rapid spike + 5.0 U safety cap",
    "Cloud sync (UPLOAD → CONFIRM → WIPE)",
    "Sync failure (no data loss)",
    "SNN severity affects dose magnitude",
    "Buffer full (ring eviction)",
    "Azure Insights disabled (no-op)",
    "Azure Insights enabled (telemetry)",
    "Emergency descent (injection suppressed)",
    "PREDIABETIC mode (notifications only)",
    "Floating-point boundary (ε guard)",
)

# Known faults used to check that the suite notices them.
MUTATIONS = ("epsilon_zero", "wipe_before_confirm")


@dataclass(frozen=True)
class ScenarioResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float


class _EagerWipeQueue(SyncQueue):
    """Faulty queue: wipes a batch as soon as it starts uploading."""

    def begin(self) -> Batch | None:
        batch = super().begin()
        if batch is not None:
            self._wipe(batch)
            self.inflight = batch
        return batch

    def confirm(self, batch: Batch, token: str) -> int:
        self.used_tokens.add(token)
        batch.state = BatchState.CONFIRMED
        self.inflight = None
        return len(batch.records)


class _Env:
    def __init__(self, mutations: frozenset[str], classifier_factory: Callable | None):
        self.mutations = mutations
        self.classifier_factory = classifier_factory

    def bell(self) -> ThresholdBell:
        return ThresholdBell(epsilon=0.0) if "epsilon_zero" in self.mutations else ThresholdBell()

    def queue(self) -> SyncQueue:
        return _EagerWipeQueue() if "wipe_before_confirm" in self.mutations else SyncQueue()

    def pipeline(self, classifier=None, **kw) -> Pipeline:
        if classifier is None and self.classifier_factory is not None:
            classifier = self.classifier_factory()
        kw.setdefault("bell", self.bell())
        kw.setdefault("queue", self.queue())
        return Pipeline(classifier, **kw)


def _feed(p: Pipeline, volts: Iterable[float], cadence: float = 5.0, t0: float = 0.0):
    """Run voltages through ``p``; returns the event list of each reading."""
    out = []
    for i, v in enumerate(volts):
        out.append(p.on_voltage(t0 + i * cadence, v))
    return out


def _kinds(events_per_reading, cls) -> list[int]:
    return [i for i, evs in enumerate(events_per_reading) if any(isinstance(e, cls) for e in evs)]


def _of(events_per_reading, cls) -> list:
    return [e for evs in events_per_reading for e in evs if isinstance(e, cls)]


FLAT = [1.0] * 10


def _s1(env: _Env):
    p = env.pipeline()
    evs = _feed(p, FLAT + [1.2, 1.4])
    last = evs[-1]
    kinds = [type(e).__name__ for e in last]
    ok = (all(isinstance(e[0], NoOp) for e in evs[:-1])
          and kinds == ["BellWake", "Classified", "Injection"]
          and not last[1].fallback and 0.0 < last[2].units <= DOSE_CAP_UNITS)
    return ok, f"last reading events {kinds}, dose {last[2].units if len(last) > 2 else None}"


def _s2(env: _Env):
    p = env.pipeline()
    volts = [0.8 + 0.3 * ((i % 12) / 11.0) for i in range(48)]  # saw-tooth 0.8-1.1 V
    evs = _feed(p, volts)
    ok = all(len(e) == 1 and isinstance(e[0], NoOp) for e in evs) and p.stats.wakes == 0
    return ok, f"{p.stats.wakes} wakes over {len(volts)} readings"


def _s3(env: _Env):
    p = env.pipeline()
    evs = _feed(p, FLAT + [1.4, 1.45, 1.42, 1.46, 1.44, 1.47])
    wakes = _kinds(evs, BellWake)
    return wakes == [10], f"wakes at readings {wakes}"


def _s4(env: _Env):
    p = env.pipeline()
    evs = _feed(p, FLAT + [1.4, 1.2, 1.0, 1.0, 1.0, 1.4])
    wakes = _kinds(evs, BellWake)
    return wakes == [10, 15], f"wakes at readings {wakes}"


def _s5(env: _Env):
    p = env.pipeline()
    volts = [1.0 + 0.01 * i for i in range(61)]  # 1.0 -> 1.6 V at 2 mg/dL per 5 min
    evs = _feed(p, volts)
    wakes = _of(evs, BellWake)
    doses = [e.units for e in _of(evs, Injection)]
    thr = [w.new_threshold for w in wakes]
    ok = (not _of(evs, EmergencyAlert) and len(wakes) == 3 and len(doses) == 3
          and all(a < b for a, b in zip(thr, thr[1:]))
          and all(a <= b for a, b in zip(doses, doses[1:]))
          and all(0 < d <= DOSE_CAP_UNITS for d in doses))
    return ok, f"{len(wakes)} wakes, thresholds {[round(x, 4) for x in thr]}, doses {[round(d, 4) for d in doses]}"


def _s6(env: _Env):
    p = env.pipeline()
    evs = _feed(p, [0.0, 0.4, 0.8, 1.2, 3.0], cadence=1.0)
    inj = _of(evs, Injection)
    ok = len(inj) == 1 and inj[0].units == DOSE_CAP_UNITS and inj[0].capped
    return ok, f"injections {[(e.units, e.capped) for e in inj]}"


def _s7(env: _Env):
    cloud = SimulatedCloud()
    p = env.pipeline(cloud=cloud)
    _feed(p, FLAT + [1.2, 1.4, 1.1, 1.0])
    p.try_sync()
    q = p.queue
    ok_out = [o for o in p.sync_log if o.status == "ok"]
    ok = (len(q) == 0 and len(cloud.store) > 0 and ok_out
          and all(o.wiped == o.batch_size for o in ok_out)
          and all(c == 1 for c in q.wipe_counts.values())
          and len(q.wipe_counts) == len(cloud.store))
    return bool(ok), f"cloud holds {len(cloud.store)} records, queue {len(q)}, outcomes {[o.status for o in p.sync_log]}"


def _s8(env: _Env):
    q = env.queue()
    for i in range(5):
        q.append({"seq": i})
    before = [(r.id, r.payload) for r in q.contents()]
    cloud = SimulatedCloud(fail_on={0}, fail_point="before_upload")
    first = sync(q, cloud)
    after = [(r.id, r.payload) for r in q.contents()]
    second = sync(q, cloud)
    ok = (first.status == "retryable" and after == before and second.status == "ok"
          and sorted(cloud.store) == [rid for rid, _ in before] and len(q) == 0)
    return ok, f"first {first.status}, kept {len(after)}/{len(before)}, second {second.status}"


def _s9(env: _Env):
    volts = FLAT + [1.2, 1.35]
    doses = {}
    for sev in (0, 2):
        p = env.pipeline(classifier=FixedClassifier(sev))
        inj = _of(_feed(p, volts), Injection)
        doses[sev] = inj[0].units if inj else None
    ok = None not in doses.values() and doses[2] > doses[0]
    return ok, f"dose LOW {doses[0]}, HIGH {doses[2]}"


def _s10(env: _Env):
    buf = VoltageBuffer(60)
    p = env.pipeline(buffer=buf)
    _feed(p, [0.6 + 0.002 * i for i in range(75)])
    ts = [r.t for r in buf]
    ok = len(buf) == 60 and ts[0] == 15 * 5.0 and ts[-1] == 74 * 5.0 and ts == sorted(ts)
    return ok, f"len {len(buf)}, oldest t={ts[0]}"


def _s11(env: _Env):
    sink = CountingSink()
    p = env.pipeline(telemetry=Telemetry(enabled=False, sink=sink))
    _feed(p, FLAT + [1.2, 1.4])
    return sink.calls == 0, f"sink calls {sink.calls}"


def _s12(env: _Env):
    sink = CountingSink()
    p = env.pipeline(telemetry=Telemetry(enabled=True, sink=sink))
    evs = _feed(p, FLAT + [1.2, 1.4])
    expected = sum(1 for e in evs for x in e if not isinstance(x, NoOp))
    return sink.calls == expected and expected > 0, f"sink calls {sink.calls}, events {expected}"


def _s13(env: _Env):
    p = env.pipeline()
    volts = [1.25, 0.95, 0.65, 0.35, 0.05]  # -0.3 V/min at 1-minute cadence
    evs = _feed(p, volts, cadence=1.0)
    alerts = _kinds(evs, EmergencyAlert)
    urgent = [e for e in _of(evs, Notification) if e.tier is Tier.URGENT]
    hypo_v = glucose_to_voltage(70.0)
    first_hypo = next(i for i, v in enumerate(volts) if v < hypo_v)
    ok = (alerts == [1, 2, 3, 4] and len(urgent) == 4 and not _of(evs, Injection)
          and not _of(evs, Classified) and not _of(evs, BellWake) and alerts[0] < first_hypo)
    return ok, f"alerts at {alerts}, raw hypo at {first_hypo}"


def _s14(env: _Env):
    p = env.pipeline(classifier=FixedClassifier(2), mode=Mode.PREDIABETIC)
    evs = _feed(p, FLAT + [1.2, 1.4, 1.2, 1.0, 1.0, 1.5])
    notes = _of(evs, Notification)
    ok = (not _of(evs, Injection) and len(notes) == 2
          and all(n.tier is Tier.URGENT and n.severity == 2 for n in notes))
    return ok, f"notifications {[n.tier.value for n in notes]}, injections {len(_of(evs, Injection))}"


def _s15(env: _Env):
    p = env.pipeline()
    thr = p.bell.threshold
    a = p.on_voltage(0.0, thr + 1e-12)
    b = p.on_voltage(5.0, thr + 1e-6)
    ok = isinstance(a[0], NoOp) and isinstance(b[0], BellWake)
    return ok, f"threshold+1e-12 -> {type(a[0]).__name__}, threshold+1e-6 -> {type(b[0]).__name__}"


SCENARIOS = (_s1, _s2, _s3, _s4, _s5, _s6, _s7, _s8, _s9, _s10, _s11, _s12, _s13, _s14, _s15)


def run_scenarios(mutations: Iterable[str] = (), classifier_factory: Callable | None = None
                  ) -> list[ScenarioResult]:
    """Execute all 15 scenarios. ``classifier_factory`` builds the default classifier."""
    mut = frozenset(mutations)
    unknown = mut - set(MUTATIONS)
    if unknown:
        raise ValueError(f"unknown mutations {sorted(unknown)}")
    env = _Env(mut, classifier_factory)
    results = []
    for n, (name, fn) in enumerate(zip(SCENARIO_NAMES, SCENARIOS), start=1):
        t0 = time.perf_counter()
        try:
            ok, detail = fn(env)
        except Exception as exc:  # a crash is a failure, not an abort of the suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(ScenarioResult(n, name, bool(ok), detail, time.perf_counter() - t0))
    return results


def format_report(results: list[ScenarioResult]) -> str:
    lines = [f"{r.number:>2}  {'PASS' if r.passed else 'FAIL'}  {r.name}  ({r.detail})" for r in results]
    n_ok = sum(r.passed for r in results)
    lines.append(f"{n_ok}/{len(results)} PASS")
    return "\n".join(lines)
