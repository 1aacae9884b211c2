"""The ingestion/query/forecast HTTP service.

All writes funnel through one lock (the store's single-writer discipline);
reads see consistent snapshots. Every error response, including framework
validation failures and unknown routes, conforms to the ApiErrorModel schema.
"""

from __future__ import annotations

import json
import os
import threading
import time

import numpy as np
from fastapi import FastAPI, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from starlette.exceptions import HTTPException as StarletteHTTPException

from .. import __version__
from ..bundle import ModelBundle, load_bundle
from ..config import ServerConfig
from ..downtime import (
    AlertManager,
    MaintenanceEvent,
    OperatingEnvelope,
    Operations,
    alerts_header,
    evaluate_envelope,
    format_alert_line,
    format_maintenance_line,
    load_alert_journal,
    load_maintenance_log,
    maintenance_header,
)
from ..errors import (
    ConfigError,
    InvalidArgumentError,
    InvalidDatasetError,
    InvalidRangeError,
    NotFoundError,
    RejectedReadingError,
    TubePdmError,
)
from ..params import MACHINE_ID_RE, ParameterSchema
from ..pipeline import forecast_for_machine, grid_matrix
from ..store import SensorReading, SeriesFrame, TelemetryStore, load_log
from . import schemas

TELEMETRY_LOG = "telemetry.log"
ALERTS_LOG = "alerts.log"
MAINT_LOG = "maintenance.log"
ENVELOPES_FILE = "envelopes.json"


class ApiException(TubePdmError):
    """Raised by handlers to produce a structured error response."""

    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def _error_response(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status,
                        content={"code": code, "message": message})


class AppState:
    """Everything the handlers share: store, operator state, model, config."""

    def __init__(self, config: ServerConfig):
        self.config = config
        self.write_lock = threading.Lock()
        self.clock = lambda: int(time.time() * 1000)
        os.makedirs(config.data_dir, exist_ok=True)

        telemetry_path = os.path.join(config.data_dir, TELEMETRY_LOG)
        if os.path.exists(telemetry_path) and os.path.getsize(telemetry_path) > 0:
            self.store = load_log(telemetry_path)
        else:
            self.store = TelemetryStore(ParameterSchema(zones=config.machine_zones))
        self.telemetry_path = telemetry_path

        self.alerts_path = os.path.join(config.data_dir, ALERTS_LOG)
        manager = AlertManager()
        if os.path.exists(self.alerts_path):
            load_alert_journal(self.alerts_path, manager)
        manager.on_transition = self._journal_alert

        self.maint_path = os.path.join(config.data_dir, MAINT_LOG)
        self.ops = Operations(self.store, manager)
        if os.path.exists(self.maint_path):
            for event in load_maintenance_log(self.maint_path):
                self.ops.maintenance.append(event)
                self.ops.boundaries.setdefault(event.machine_id, []).append(event.timestamp_ms)
        self.ops.on_maintenance = self._journal_maintenance

        self.envelopes: dict[str, OperatingEnvelope] = {}
        self.envelopes_path = os.path.join(config.data_dir, ENVELOPES_FILE)
        if os.path.exists(self.envelopes_path):
            self._load_envelopes()

        self.bundle: ModelBundle | None = None
        if config.model_path:
            self.bundle = load_bundle(config.model_path)
            if self.bundle.zones != self.store.schema.zones:
                raise ConfigError(
                    f"model bundle has zones={self.bundle.zones} but the store "
                    f"schema has zones={self.store.schema.zones}")

    # ── persistence hooks ──────────────────────────────────────────────────

    def _journal_alert(self, event: str, alert, at_ms: int) -> None:
        fresh = not os.path.exists(self.alerts_path) or os.path.getsize(self.alerts_path) == 0
        with open(self.alerts_path, "a", encoding="utf-8", newline="") as fh:
            if fresh:
                fh.write(alerts_header())
            fh.write(format_alert_line(event, alert, at_ms))

    def _journal_maintenance(self, event: MaintenanceEvent) -> None:
        fresh = not os.path.exists(self.maint_path) or os.path.getsize(self.maint_path) == 0
        with open(self.maint_path, "a", encoding="utf-8", newline="") as fh:
            if fresh:
                fh.write(maintenance_header())
            fh.write(format_maintenance_line(event))

    def _load_envelopes(self) -> None:
        with open(self.envelopes_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        for machine_id, body in raw.items():
            self.envelopes[machine_id] = OperatingEnvelope(
                bounds={p: (b[0], b[1]) for p, b in body["bounds"].items()},
                sustain_steps=body["sustain_steps"])

    def _save_envelopes(self) -> None:
        raw = {
            machine_id: {
                "bounds": {p: [lo, hi] for p, (lo, hi) in env.bounds.items()},
                "sustain_steps": env.sustain_steps,
            }
            for machine_id, env in self.envelopes.items()
        }
        tmp = self.envelopes_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(raw, fh, indent=2)
        os.replace(tmp, self.envelopes_path)

    # ── shared lookups ─────────────────────────────────────────────────────

    def envelope_for(self, machine_id: str) -> OperatingEnvelope | None:
        return self.envelopes.get(machine_id) or self.config.envelope

    def require_machine(self, machine_id: str) -> None:
        if not MACHINE_ID_RE.match(machine_id):
            raise ApiException(400, "bad_request", f"invalid machine id {machine_id!r}")
        if not self.store.has_machine(machine_id):
            raise ApiException(404, "not_found", f"unknown machine {machine_id!r}")

    def recent_frames(self, machine_id: str, count: int, period_ms: int) -> list[SeriesFrame]:
        matrix, timestamps = grid_matrix(self.store, machine_id, period_ms)
        frames = []
        for i in range(max(0, len(timestamps) - count), len(timestamps)):
            values = tuple(None if np.isnan(v) else float(v) for v in matrix[i])
            frames.append(SeriesFrame(timestamp_ms=int(timestamps[i]), values=values))
        return frames

    def sync_violation_alerts(self, machine_id: str) -> None:
        envelope = self.envelope_for(machine_id)
        if envelope is None:
            return
        period = self.bundle.period_ms if self.bundle else 1000
        frames = self.recent_frames(machine_id, envelope.sustain_steps + 2, period)
        violations = evaluate_envelope(frames, envelope, self.store.schema)
        self.ops.alerts.sync_violations(machine_id, violations, self.clock())


def create_app(config: ServerConfig | None = None) -> FastAPI:
    state = AppState(config or ServerConfig())
    app = FastAPI(title="tubepdm", version=__version__)
    app.state.pdm = state
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"])

    _register_error_handlers(app)
    _register_routes(app, state)

    if state.config.ui_dir and os.path.isdir(state.config.ui_dir):
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=state.config.ui_dir, html=True), name="ui")
    return app


def _register_error_handlers(app: FastAPI) -> None:
    @app.exception_handler(ApiException)
    async def handle_api_exception(request: Request, exc: ApiException):
        return _error_response(exc.status, exc.code, exc.message)

    @app.exception_handler(RequestValidationError)
    async def handle_validation(request: Request, exc: RequestValidationError):
        return _error_response(400, "bad_request", str(exc.errors()[:3]))

    @app.exception_handler(StarletteHTTPException)
    async def handle_http(request: Request, exc: StarletteHTTPException):
        code = {404: "not_found", 409: "conflict"}.get(
            exc.status_code, "bad_request" if exc.status_code < 500 else "internal")
        return _error_response(exc.status_code, code, str(exc.detail))

    @app.exception_handler(NotFoundError)
    async def handle_not_found(request: Request, exc: NotFoundError):
        return _error_response(404, "not_found", str(exc))

    @app.exception_handler(InvalidRangeError)
    async def handle_bad_range(request: Request, exc: InvalidRangeError):
        return _error_response(400, "bad_request", str(exc))

    @app.exception_handler(InvalidArgumentError)
    async def handle_bad_argument(request: Request, exc: InvalidArgumentError):
        return _error_response(400, "bad_request", str(exc))

    @app.exception_handler(InvalidDatasetError)
    async def handle_bad_dataset(request: Request, exc: InvalidDatasetError):
        return _error_response(409, "conflict", str(exc))

    @app.exception_handler(Exception)
    async def handle_internal(request: Request, exc: Exception):
        return _error_response(500, "internal", f"{type(exc).__name__}: {exc}")


def _register_routes(app: FastAPI, state: AppState) -> None:
    prefix = "/api/v1"

    @app.get(prefix + "/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(
            version=__version__,
            model_loaded=state.bundle is not None,
            poll_interval_ms=state.config.poll_interval_ms,
            machines=state.store.machines(),
        )

    @app.post(prefix + "/readings", response_model=schemas.IngestResponse)
    def ingest(batch: schemas.IngestRequest):
        accepted = 0
        rejections = []
        stored: list[SensorReading] = []
        with state.write_lock:
            for index, item in enumerate(batch.readings):
                reading = SensorReading(
                    machine_id=item.machine_id, timestamp_ms=item.timestamp_ms,
                    parameter=item.parameter, value=item.value)
                try:
                    state.store.append(reading)
                except RejectedReadingError as exc:
                    rejections.append(schemas.RejectionOut(index=index, reason=str(exc)))
                    continue
                stored.append(reading)
                accepted += 1
            if stored:
                state.store.append_to_log(state.telemetry_path, stored)
            for machine_id in sorted({r.machine_id for r in stored}):
                state.sync_violation_alerts(machine_id)
        return schemas.IngestResponse(
            accepted=accepted, rejected=len(rejections), rejections=rejections)

    @app.get(prefix + "/machines/{machine_id}/latest", response_model=schemas.FrameResponse)
    def latest(machine_id: str):
        state.require_machine(machine_id)
        frame = state.store.latest_frame(machine_id)
        values = dict(zip(state.store.schema.parameters(), frame.values))
        return schemas.FrameResponse(
            machine_id=machine_id, timestamp_ms=frame.timestamp_ms, values=values)

    @app.get(prefix + "/machines/{machine_id}/series",
             response_model=list[schemas.ReadingOut])
    def series(machine_id: str, parameter: str, from_ms: int = 0,
               to_ms: int | None = None):
        state.require_machine(machine_id)
        if not state.store.schema.is_valid(parameter):
            raise ApiException(400, "bad_request", f"unknown parameter {parameter!r}")
        upper = to_ms if to_ms is not None else (1 << 62)
        readings = state.store.query_range(machine_id, parameter, from_ms, upper)
        return [schemas.ReadingOut(timestamp_ms=r.timestamp_ms, machine_id=r.machine_id,
                                   parameter=r.parameter, value=r.value)
                for r in readings]

    @app.get(prefix + "/machines/{machine_id}/forecast",
             response_model=schemas.ForecastResponse)
    def forecast(machine_id: str, horizon_steps: int = 64):
        state.require_machine(machine_id)
        if state.bundle is None:
            raise ApiException(409, "conflict", "no trained model")
        envelope = state.envelope_for(machine_id)
        if envelope is None:
            raise ApiException(409, "conflict",
                               f"no operating envelope configured for {machine_id!r}")
        if horizon_steps < 1:
            raise ApiException(400, "bad_request", "horizon_steps must be >= 1")
        result, steps_raw, step_ts = forecast_for_machine(
            state.store, machine_id, state.bundle, envelope, horizon_steps)
        with state.write_lock:
            warning_lead = state.config.warning_lead_periods * state.bundle.period_ms
            state.ops.alerts.sync_forecast(machine_id, result, warning_lead, state.clock())
            state.sync_violation_alerts(machine_id)
        parameters = state.store.schema.parameters()
        steps = [
            schemas.ForecastStepOut(
                timestamp_ms=int(t),
                values={p: float(v) for p, v in zip(parameters, row)})
            for t, row in zip(step_ts, steps_raw)
        ]
        return schemas.ForecastResponse(
            machine_id=machine_id,
            generated_at_ms=result.generated_at_ms,
            predicted_down_at_ms=result.predicted_down_at_ms,
            lead_time_ms=result.lead_time_ms,
            confidence=result.confidence,
            contributing_parameters=[
                schemas.ContributingParameterOut(parameter=p, first_out_of_bounds_step=s)
                for p, s in result.contributing_parameters],
            steps=steps,
        )

    @app.get(prefix + "/machines/{machine_id}/envelope", response_model=schemas.EnvelopeModel)
    def get_envelope(machine_id: str):
        state.require_machine(machine_id)
        envelope = state.envelope_for(machine_id)
        if envelope is None:
            raise ApiException(404, "not_found",
                               f"no envelope configured for {machine_id!r}")
        return schemas.EnvelopeModel(
            parameters={p: schemas.BoundsModel(lower=lo, upper=hi)
                        for p, (lo, hi) in envelope.bounds.items()},
            sustain_steps=envelope.sustain_steps)

    @app.put(prefix + "/machines/{machine_id}/envelope", response_model=schemas.EnvelopeModel)
    def put_envelope(machine_id: str, body: schemas.EnvelopeModel):
        state.require_machine(machine_id)
        for parameter, bounds in body.parameters.items():
            if not state.store.schema.is_valid(parameter):
                raise ApiException(400, "bad_request", f"unknown parameter {parameter!r}")
            if bounds.lower >= bounds.upper:
                raise ApiException(
                    400, "bad_request",
                    f"{parameter}: lower {bounds.lower} must be < upper {bounds.upper}")
        if body.sustain_steps < 1:
            raise ApiException(400, "bad_request", "sustain_steps must be >= 1")
        envelope = OperatingEnvelope(
            bounds={p: (b.lower, b.upper) for p, b in body.parameters.items()},
            sustain_steps=body.sustain_steps)
        with state.write_lock:
            state.envelopes[machine_id] = envelope  # atomic replace
            state._save_envelopes()
        return body

    @app.get(prefix + "/machines/{machine_id}/alerts", response_model=list[schemas.AlertOut])
    def list_alerts(machine_id: str,
                    wanted: str | None = Query(default=None, alias="state")):
        state.require_machine(machine_id)
        if wanted is not None and wanted not in ("open", "acknowledged", "resolved"):
            raise ApiException(400, "bad_request", f"unknown alert state {wanted!r}")
        return [_alert_out(a) for a in state.ops.alerts.alerts(machine_id, wanted)]

    @app.post(prefix + "/alerts/{alert_id}/ack", response_model=schemas.AlertOut)
    def acknowledge(alert_id: int):
        with state.write_lock:
            alert = state.ops.alerts.acknowledge(alert_id, state.clock())
        return _alert_out(alert)

    @app.get(prefix + "/machines/{machine_id}/maintenance",
             response_model=list[schemas.MaintenanceOut])
    def list_maintenance(machine_id: str):
        state.require_machine(machine_id)
        return [schemas.MaintenanceOut(machine_id=e.machine_id, timestamp_ms=e.timestamp_ms,
                                       note=e.note, performed_by=e.performed_by)
                for e in state.ops.maintenance_log(machine_id)]

    @app.post(prefix + "/machines/{machine_id}/maintenance",
              response_model=schemas.MaintenanceOut, status_code=201)
    def record_maintenance(machine_id: str, body: schemas.MaintenanceIn):
        state.require_machine(machine_id)
        if not body.note.strip():
            raise ApiException(400, "bad_request", "note must not be empty")
        if not body.performed_by.strip():
            raise ApiException(400, "bad_request", "performed_by must not be empty")
        now = state.clock()
        event = MaintenanceEvent(
            machine_id=machine_id,
            timestamp_ms=body.timestamp_ms if body.timestamp_ms is not None else now,
            note=body.note, performed_by=body.performed_by)
        with state.write_lock:
            state.ops.record_maintenance(event, now)
        return schemas.MaintenanceOut(machine_id=event.machine_id,
                                      timestamp_ms=event.timestamp_ms,
                                      note=event.note, performed_by=event.performed_by)


def _alert_out(alert) -> schemas.AlertOut:
    snapshot = None
    if alert.forecast is not None:
        f = alert.forecast
        snapshot = schemas.ForecastSnapshotOut(
            generated_at_ms=f.generated_at_ms,
            predicted_down_at_ms=f.predicted_down_at_ms,
            lead_time_ms=f.lead_time_ms,
            confidence=f.confidence,
            contributing_parameters=[
                schemas.ContributingParameterOut(parameter=p, first_out_of_bounds_step=s)
                for p, s in f.contributing_parameters])
    return schemas.AlertOut(
        id=alert.id, machine_id=alert.machine_id, severity=alert.severity,
        state=alert.state, created_at_ms=alert.created_at_ms, message=alert.message,
        forecast=snapshot)
