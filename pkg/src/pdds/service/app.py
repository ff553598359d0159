"""FastAPI wrapper: streaming pipeline sessions plus stateless dose, classify and report endpoints."""
from __future__ import annotations

import threading
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException

from ..baselines import EnergyModel, energy_report, rule_assess_features
from ..dosing import compute_dose
from ..fixtures import bundled_weights
from ..pipeline import Mode, Pipeline, RuleClassifier, SnnClassifier, Telemetry, event_dict
from ..scenarios import run_scenarios
from ..signal import VoltageReading
from ..snn import SEVERITY_NAMES, EncoderConfig, SpikingNet, encode_batch, encoder_from_meta, forward, load_weights
from ..sync import SimulatedCloud
from . import schemas as S


class _Session:
    def __init__(self, pipeline: Pipeline, classifier: str):
        self.pipeline = pipeline
        self.classifier = classifier
        self.lock = threading.Lock()  # one writer per session

    def info(self, sid: str) -> S.SessionInfo:
        p, st = self.pipeline, self.pipeline.stats
        return S.SessionInfo(session_id=sid, mode=p.mode.value, classifier=self.classifier,
                             readings=st.readings, wakes=st.wakes, emergencies=st.emergencies,
                             injections=st.injections, notifications=st.notifications,
                             pending_records=len(p.queue), bell=p.bell.snapshot())


def create_app(weights: str | Path | None = None) -> FastAPI:
    """Build the service. ``weights`` defaults to the bundled trained net if present."""
    path = Path(weights) if weights else bundled_weights()
    net: SpikingNet | None = None
    enc = EncoderConfig()
    if path is not None:
        net, meta = load_weights(path)
        enc = encoder_from_meta(meta)

    app = FastAPI(title="pdds", version="0.1.0")
    sessions: dict[str, _Session] = {}
    registry_lock = threading.Lock()

    def get(sid: str) -> _Session:
        with registry_lock:
            s = sessions.get(sid)
        if s is None:
            raise HTTPException(404, f"unknown session {sid}")
        return s

    @app.get("/health")
    def health():
        return {"status": "ok", "weights": str(path) if path else None, "sessions": len(sessions)}

    @app.post("/sessions", response_model=S.SessionInfo, status_code=201)
    def create_session(req: S.SessionCreate):
        if req.classifier == "snn":
            if net is None:
                raise HTTPException(409, "no trained weights loaded; use classifier='rule'")
            clf = SnnClassifier(net, enc, seed=req.seed)
        else:
            clf = RuleClassifier()
        p = Pipeline(clf, mode=Mode(req.mode), cloud=SimulatedCloud(fail_on=req.cloud_fail_on),
                     telemetry=Telemetry(enabled=req.telemetry, sink=None))
        sid = uuid.uuid4().hex
        s = _Session(p, req.classifier)
        with registry_lock:
            sessions[sid] = s
        return s.info(sid)

    @app.get("/sessions/{sid}", response_model=S.SessionInfo)
    def session_info(sid: str):
        s = get(sid)
        with s.lock:
            return s.info(sid)

    @app.delete("/sessions/{sid}", status_code=204)
    def delete_session(sid: str):
        with registry_lock:
            if sessions.pop(sid, None) is None:
                raise HTTPException(404, f"unknown session {sid}")

    @app.post("/sessions/{sid}/readings", response_model=S.ReadingsResponse)
    def push_readings(sid: str, req: S.ReadingsRequest):
        s = get(sid)
        out = []
        with s.lock:
            for r in req.readings:
                try:
                    reading = (VoltageReading(r.t, r.v) if r.v is not None
                               else VoltageReading.from_glucose(r.t, r.glucose_mgdl))
                    events = s.pipeline.on_reading(reading)
                except ValueError as exc:
                    raise HTTPException(422, str(exc)) from exc
                for ev in events:
                    d = event_dict(ev)
                    out.append(S.EventOut(t=r.t, kind=d.pop("kind"), data=d))
        return S.ReadingsResponse(events=out)

    @app.post("/sessions/{sid}/sync", response_model=S.SyncResponse)
    def session_sync(sid: str):
        s = get(sid)
        with s.lock:
            o = s.pipeline.try_sync()
            return S.SyncResponse(status=o.status, batch_size=o.batch_size, wiped=o.wiped,
                                  error=o.error, pending_records=len(s.pipeline.queue))

    @app.post("/dose", response_model=S.DoseResponse)
    def dose(req: S.DoseRequest):
        r = compute_dose(req.v, req.slope, req.severity)
        return S.DoseResponse(units=r.units, excess=r.excess, sigmoid_gate=r.sigmoid_gate,
                              capped=r.capped)

    @app.post("/classify", response_model=S.ClassifyResponse)
    def classify(req: S.ClassifyRequest):
        f = np.asarray(req.features, dtype=np.float64)
        if np.any((f < 0) | (f > 1)):
            raise HTTPException(422, "features must lie in [0, 1]")
        rule = int(rule_assess_features(f)[0])
        if net is None:
            raise HTTPException(409, "no trained weights loaded")
        rng = np.random.default_rng(req.seed)
        counts = np.zeros(3, dtype=np.int64)
        votes = np.zeros(3, dtype=np.int64)
        for _ in range(req.repeats):
            res = forward(net, encode_batch(f[None], enc, rng)[0])
            counts += res.counts
            votes[res.severity] += 1
        sev = int(2 - np.argmax(votes[::-1]))  # ties to the higher class
        return S.ClassifyResponse(severity=sev, label=SEVERITY_NAMES[sev], counts=counts.tolist(),
                                  rule_severity=rule)

    @app.get("/scenarios", response_model=S.ScenariosResponse)
    def scenarios():
        res = run_scenarios()
        return S.ScenariosResponse(
            passed=sum(r.passed for r in res), total=len(res),
            results=[S.ScenarioOut(number=r.number, name=r.name, passed=r.passed, detail=r.detail)
                     for r in res])

    @app.post("/energy")
    def energy(req: S.EnergyRequest):
        if req.calibrate:
            if req.synops <= 0:
                raise HTTPException(422, "calibration needs synops > 0")
            model = EnergyModel.calibrated(req.synops)
        else:
            kw = {k: v for k, v in (("e_synop", req.e_synop), ("e_mac", req.e_mac)) if v is not None}
            model = EnergyModel(**kw)
        return energy_report(req.synops, model=model)

    return app
