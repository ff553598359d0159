"""Request and response models for the HTTP service."""
from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator


class Reading(BaseModel):
    """One sensor sample, given either as glucose or as the internal voltage."""

    t: float
    glucose_mgdl: Optional[float] = Field(None, ge=0)
    v: Optional[float] = Field(None, ge=0.0, le=3.0)

    @model_validator(mode="after")
    def _one_value(self):
        if (self.glucose_mgdl is None) == (self.v is None):
            raise ValueError("give exactly one of glucose_mgdl or v")
        return self


class SessionCreate(BaseModel):
    mode: Literal["diabetic", "prediabetic"] = "diabetic"
    classifier: Literal["snn", "rule"] = "snn"
    telemetry: bool = False
    seed: int = 0
    cloud_fail_on: list[int] = Field(default_factory=list)


class SessionInfo(BaseModel):
    session_id: str
    mode: str
    classifier: str
    readings: int
    wakes: int
    emergencies: int
    injections: int
    notifications: int
    pending_records: int
    bell: dict


class ReadingsRequest(BaseModel):
    readings: list[Reading] = Field(..., min_length=1)


class EventOut(BaseModel):
    t: float
    kind: str
    data: dict


class ReadingsResponse(BaseModel):
    events: list[EventOut]


class SyncResponse(BaseModel):
    status: str
    batch_size: int
    wiped: int
    error: Optional[str] = None
    pending_records: int


class DoseRequest(BaseModel):
    v: float = Field(..., ge=0.0, le=3.0)
    slope: float
    severity: int = Field(..., ge=0, le=2)


class DoseResponse(BaseModel):
    units: float
    excess: float
    sigmoid_gate: float
    capped: bool


class ClassifyRequest(BaseModel):
    features: list[float] = Field(..., min_length=10, max_length=10)
    repeats: int = Field(1, ge=1, le=101)
    seed: int = 0


class ClassifyResponse(BaseModel):
    severity: int
    label: str
    counts: list[int]
    rule_severity: int


class ScenarioOut(BaseModel):
    number: int
    name: str
    passed: bool
    detail: str


class ScenariosResponse(BaseModel):
    passed: int
    total: int
    results: list[ScenarioOut]


class EnergyRequest(BaseModel):
    synops: float = Field(..., ge=0)
    e_synop: Optional[float] = Field(None, gt=0)
    e_mac: Optional[float] = Field(None, gt=0)
    calibrate: bool = False
