"""Request/response models: the frozen JSON wire contract.

Field names are part of the contract the dashboard and the tests rely on:
`timestamp_ms`, `machine_id`, `parameter`, `value` for readings and
`predicted_down_at_ms`, `lead_time_ms`, `confidence`,
`contributing_parameters` for forecasts.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class ApiErrorModel(BaseModel):
    code: str  # bad_request | not_found | conflict | internal
    message: str


class ReadingIn(BaseModel):
    timestamp_ms: int
    machine_id: str
    parameter: str
    value: float  # NaN/Inf pass the parser and are rejected per-reading


class ReadingOut(BaseModel):
    timestamp_ms: int
    machine_id: str
    parameter: str
    value: float


class IngestRequest(BaseModel):
    readings: list[ReadingIn]


class RejectionOut(BaseModel):
    index: int
    reason: str


class IngestResponse(BaseModel):
    accepted: int
    rejected: int
    rejections: list[RejectionOut] = Field(default_factory=list)


class FrameResponse(BaseModel):
    machine_id: str
    timestamp_ms: int
    values: dict[str, float | None]  # parameter token -> latest value


class ContributingParameterOut(BaseModel):
    parameter: str
    first_out_of_bounds_step: int


class ForecastStepOut(BaseModel):
    timestamp_ms: int
    values: dict[str, float]


class ForecastResponse(BaseModel):
    machine_id: str
    generated_at_ms: int
    predicted_down_at_ms: int | None
    lead_time_ms: int | None
    confidence: float
    contributing_parameters: list[ContributingParameterOut]
    steps: list[ForecastStepOut]  # per-step forecast series for chart overlay


class BoundsModel(BaseModel):
    lower: float
    upper: float


class EnvelopeModel(BaseModel):
    parameters: dict[str, BoundsModel]
    sustain_steps: int = 3


class ForecastSnapshotOut(BaseModel):
    generated_at_ms: int
    predicted_down_at_ms: int | None
    lead_time_ms: int | None
    confidence: float
    contributing_parameters: list[ContributingParameterOut]


class AlertOut(BaseModel):
    id: int
    machine_id: str
    severity: str
    state: str
    created_at_ms: int
    message: str
    forecast: ForecastSnapshotOut | None = None


class MaintenanceIn(BaseModel):
    note: str
    performed_by: str
    timestamp_ms: int | None = None  # defaults to the server clock


class MaintenanceOut(BaseModel):
    machine_id: str
    timestamp_ms: int
    note: str
    performed_by: str


class HealthResponse(BaseModel):
    version: str
    model_loaded: bool
    poll_interval_ms: int
    machines: list[str]
