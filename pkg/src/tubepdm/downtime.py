"""Downtime prediction and the operator feedback loop.

Downtime here means a sustained exit from the operating envelope: a parameter
strictly outside its bounds for at least `sustain_steps` consecutive grid
steps. Forecast rollouts are checked against the envelope to produce a
predicted-down timestamp, alerts track operator acknowledgment, and recorded
maintenance closes the loop (resolves alerts, marks a window boundary).
"""

from __future__ import annotations

import urllib.parse
from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidArgumentError,
    LogFormatError,
    LogParseError,
    NotFoundError,
    StorageError,
)
from .forest import Forest, predict as forest_predict
from .lstm import LstmParams, predict_horizon_windowed
from .params import ParameterSchema
from .preprocess import NormalizationStats, denormalize, normalize
from .store import MachineStatus, SeriesFrame, TelemetryStore

ALERTS_MAGIC = "pdm-alerts"
MAINT_MAGIC = "pdm-maint"
FORMAT_VERSION = "v1"

DEFAULT_SUSTAIN_STEPS = 3
DEFAULT_WARNING_LEAD_PERIODS = 30


@dataclass(frozen=True)
class OperatingEnvelope:
    """Per-parameter safe bounds in raw units, plus the sustain requirement."""

    bounds: dict  # parameter -> (lower, upper)
    sustain_steps: int = DEFAULT_SUSTAIN_STEPS

    def __post_init__(self):
        if self.sustain_steps < 1:
            raise InvalidArgumentError("sustain_steps must be >= 1")
        for parameter, (lower, upper) in self.bounds.items():
            if not lower < upper:
                raise InvalidArgumentError(
                    f"envelope for {parameter}: lower {lower} must be < upper {upper}")

    def out_of_bounds(self, parameter: str, value: float) -> bool:
        lower, upper = self.bounds[parameter]
        return value < lower or value > upper


def envelope_from_baselines(baselines: dict, noise_sigma: dict,
                            sustain_steps: int = DEFAULT_SUSTAIN_STEPS) -> OperatingEnvelope:
    """Default envelope: baseline +/- 3 sigma of nominal noise (with a floor
    so that noiseless parameters still get a usable band)."""
    bounds = {}
    for parameter, base in baselines.items():
        sigma = noise_sigma.get(parameter, 0.0)
        margin = 3.0 * sigma
        if margin == 0.0:
            margin = max(0.05 * abs(base), 1.0)
        bounds[parameter] = (base - margin, base + margin)
    return OperatingEnvelope(bounds=bounds, sustain_steps=sustain_steps)


@dataclass(frozen=True)
class Violation:
    parameter: str
    onset_ms: int
    value: float  # latest observed value


@dataclass(frozen=True)
class DowntimeForecast:
    machine_id: str
    generated_at_ms: int
    predicted_down_at_ms: int | None
    lead_time_ms: int | None
    confidence: float
    contributing_parameters: tuple  # ((parameter, first_out_of_bounds_step), ...)


@dataclass
class Alert:
    id: int
    machine_id: str
    severity: str  # "warning" | "critical"
    created_at_ms: int
    state: str  # "open" | "acknowledged" | "resolved"
    message: str
    condition_key: str
    forecast: DowntimeForecast | None = None


@dataclass(frozen=True)
class MaintenanceEvent:
    machine_id: str
    timestamp_ms: int
    note: str
    performed_by: str


def fault_labels(matrix: np.ndarray, envelope: OperatingEnvelope,
                 schema: ParameterSchema) -> np.ndarray:
    """Binary fault labels for classifier training: 1 where any bounded
    parameter is strictly outside the envelope in that row."""
    matrix = np.asarray(matrix, dtype=float)
    labels = np.zeros(matrix.shape[0])
    for parameter, (lower, upper) in envelope.bounds.items():
        col = matrix[:, schema.index(parameter)]
        labels = np.maximum(labels, ((col < lower) | (col > upper)).astype(float))
    return labels


def evaluate_envelope(frames: list[SeriesFrame], envelope: OperatingEnvelope,
                      schema: ParameterSchema) -> list[Violation]:
    """Active violations: parameters out of bounds for >= sustain_steps
    consecutive frames ending at the latest frame. Absent values break a run.
    """
    if not frames:
        return []
    violations = []
    need = envelope.sustain_steps
    for parameter in envelope.bounds:
        idx = schema.index(parameter)
        run = 0
        onset = None
        for frame in reversed(frames):
            value = frame.values[idx]
            if value is None or not envelope.out_of_bounds(parameter, value):
                break
            run += 1
            onset = frame.timestamp_ms
        if run >= need:
            latest = frames[-1].values[idx]
            violations.append(Violation(parameter=parameter, onset_ms=onset, value=latest))
    return violations


def _first_sustained_run(out_matrix: np.ndarray, need: int) -> tuple[int | None, list]:
    """out_matrix [K, F] of booleans. Returns (0-based onset step of the first
    qualifying run across parameters, [(feature index, onset step)] per
    parameter that has one)."""
    k_steps, n_feat = out_matrix.shape
    onsets = []
    for j in range(n_feat):
        run = 0
        for t in range(k_steps):
            if out_matrix[t, j]:
                run += 1
                if run >= need:
                    onsets.append((j, t - run + 1))
                    break
            else:
                run = 0
    if not onsets:
        return None, []
    first = min(step for _, step in onsets)
    return first, onsets


def _roll_forest(forests: list, window_norm: np.ndarray, horizon: int) -> np.ndarray:
    """Autoregressive rollout of one single-output forest per parameter."""
    window = window_norm.copy()
    steps = []
    for _ in range(horizon):
        flat = window.reshape(-1)
        nxt = np.array([forest_predict(f, flat) for f in forests])
        steps.append(nxt)
        window = np.vstack([window[1:], nxt])
    return np.stack(steps)


def _roll_lstm(params: LstmParams, window_norm: np.ndarray, horizon: int) -> np.ndarray:
    # the windowed rollout keeps the recurrent state inside the regime the
    # truncated-window training actually visited; the open-ended recurrence
    # destabilizes beyond the training window length
    return predict_horizon_windowed(window_norm, params, horizon)


def forecast_downtime(
    history: np.ndarray,
    timestamps: np.ndarray,
    machine_id: str,
    lstm_params: LstmParams,
    stats: NormalizationStats,
    envelope: OperatingEnvelope,
    horizon_steps: int,
    period_ms: int,
    schema: ParameterSchema,
    forests: list | None = None,
) -> tuple[DowntimeForecast, np.ndarray]:
    """Roll the forecaster `horizon_steps` ahead and locate sustained envelope
    exits.

    `history` is the raw (denormalized) recent frame matrix; the last
    window_len rows feed the model. Forecast step k (1-based) lands at
    generated_at + k*period. Confidence is the fraction of ensemble members
    (the recurrent model, plus the forest when given) that agree with the
    reported verdict. Returns (forecast, [K, F] raw forecast matrix).
    """
    if horizon_steps < 1:
        raise InvalidArgumentError("horizon_steps must be >= 1")
    history = np.asarray(history, dtype=float)
    window_norm = normalize(history, stats)
    generated_at = int(timestamps[-1])
    need = envelope.sustain_steps

    steps_norm = _roll_lstm(lstm_params, window_norm, horizon_steps)
    steps_raw = denormalize(steps_norm, stats)

    bounded = sorted(envelope.bounds, key=schema.index)
    cols = [schema.index(p) for p in bounded]
    out = np.zeros((horizon_steps, len(cols)), dtype=bool)
    for col_pos, parameter in enumerate(bounded):
        lower, upper = envelope.bounds[parameter]
        col = steps_raw[:, cols[col_pos]]
        out[:, col_pos] = (col < lower) | (col > upper)
    onset, per_param = _first_sustained_run(out, need)
    lstm_verdict = onset is not None

    votes = [lstm_verdict]
    if forests:
        forest_steps = denormalize(_roll_forest(forests, window_norm, horizon_steps), stats)
        f_out = np.zeros_like(out)
        for col_pos, parameter in enumerate(bounded):
            lower, upper = envelope.bounds[parameter]
            col = forest_steps[:, cols[col_pos]]
            f_out[:, col_pos] = (col < lower) | (col > upper)
        f_onset, _ = _first_sustained_run(f_out, need)
        votes.append(f_onset is not None)
    confidence = votes.count(lstm_verdict) / len(votes)

    if lstm_verdict:
        down_at = generated_at + (onset + 1) * period_ms
        contributing = tuple(
            (bounded[j], step + 1) for j, step in sorted(per_param, key=lambda e: (e[1], e[0]))
        )
        forecast = DowntimeForecast(
            machine_id=machine_id, generated_at_ms=generated_at,
            predicted_down_at_ms=down_at, lead_time_ms=down_at - generated_at,
            confidence=confidence, contributing_parameters=contributing,
        )
    else:
        forecast = DowntimeForecast(
            machine_id=machine_id, generated_at_ms=generated_at,
            predicted_down_at_ms=None, lead_time_ms=None,
            confidence=confidence, contributing_parameters=(),
        )
    return forecast, steps_raw


class AlertManager:
    """Alert lifecycle: open -> acknowledged -> resolved (or open -> resolved).

    One active alert per condition key; re-reporting an active condition is a
    no-op, a condition that stops being reported resolves its alert. All
    transitions are announced to `on_transition` for journaling.
    """

    def __init__(self, on_transition=None):
        self._alerts: dict[int, Alert] = {}
        self._active: dict[str, int] = {}  # condition key -> alert id
        self._next_id = 1
        self.on_transition = on_transition

    def _emit(self, event: str, alert: Alert, at_ms: int) -> None:
        if self.on_transition is not None:
            self.on_transition(event, alert, at_ms)

    def alerts(self, machine_id: str | None = None, state: str | None = None) -> list[Alert]:
        out = [
            a for a in self._alerts.values()
            if (machine_id is None or a.machine_id == machine_id)
            and (state is None or a.state == state)
        ]
        return sorted(out, key=lambda a: a.id)

    def get(self, alert_id: int) -> Alert:
        try:
            return self._alerts[alert_id]
        except KeyError:
            raise NotFoundError(f"unknown alert id {alert_id}") from None

    def _open(self, machine_id: str, severity: str, message: str, key: str,
              now_ms: int, forecast: DowntimeForecast | None = None) -> Alert:
        alert = Alert(id=self._next_id, machine_id=machine_id, severity=severity,
                      created_at_ms=now_ms, state="open", message=message,
                      condition_key=key, forecast=forecast)
        self._next_id += 1
        self._alerts[alert.id] = alert
        self._active[key] = alert.id
        self._emit("open", alert, now_ms)
        return alert

    def _resolve_key(self, key: str, now_ms: int) -> None:
        alert_id = self._active.pop(key, None)
        if alert_id is not None:
            alert = self._alerts[alert_id]
            alert.state = "resolved"
            self._emit("resolve", alert, now_ms)

    def acknowledge(self, alert_id: int, now_ms: int) -> Alert:
        """open -> acknowledged; acknowledging again (or after resolution) is
        a no-op."""
        alert = self.get(alert_id)
        if alert.state == "open":
            alert.state = "acknowledged"
            self._emit("ack", alert, now_ms)
        return alert

    def sync_violations(self, machine_id: str, violations: list[Violation],
                        now_ms: int) -> list[Alert]:
        """Reconcile critical alerts with the currently active violations."""
        current = {f"violation:{machine_id}:{v.parameter}": v for v in violations}
        for key, violation in current.items():
            if key not in self._active:
                self._open(
                    machine_id, "critical",
                    f"{violation.parameter} out of bounds since {violation.onset_ms} "
                    f"(latest value {violation.value:g})",
                    key, now_ms)
        for key in [k for k in self._active
                    if k.startswith(f"violation:{machine_id}:") and k not in current]:
            self._resolve_key(key, now_ms)
        return self.alerts(machine_id)

    def sync_forecast(self, machine_id: str, forecast: DowntimeForecast,
                      warning_lead_ms: int, now_ms: int) -> list[Alert]:
        """Open a warning when predicted downtime is closer than the warning
        lead; resolve it when the prediction clears."""
        key = f"downtime:{machine_id}"
        predicted = (forecast.predicted_down_at_ms is not None
                     and forecast.lead_time_ms < warning_lead_ms)
        if predicted and key not in self._active:
            self._open(
                machine_id, "warning",
                f"downtime predicted at {forecast.predicted_down_at_ms} "
                f"(lead {forecast.lead_time_ms} ms, confidence {forecast.confidence:.2f})",
                key, now_ms, forecast=forecast)
        elif not predicted and key in self._active:
            self._resolve_key(key, now_ms)
        return self.alerts(machine_id)

    def resolve_machine(self, machine_id: str, now_ms: int) -> None:
        for key in [k for k, aid in self._active.items()
                    if self._alerts[aid].machine_id == machine_id]:
            self._resolve_key(key, now_ms)

    def restore(self, alert: Alert) -> None:
        """Re-insert a journaled alert (used by journal replay)."""
        self._alerts[alert.id] = alert
        if alert.state in ("open", "acknowledged"):
            self._active[alert.condition_key] = alert.id
        self._next_id = max(self._next_id, alert.id + 1)

    def replay_transition(self, event: str, alert_id: int) -> None:
        """Apply a journaled ack/resolve without re-emitting it."""
        alert = self.get(alert_id)
        if event == "ack":
            alert.state = "acknowledged"
        else:
            alert.state = "resolved"
            if self._active.get(alert.condition_key) == alert_id:
                self._active.pop(alert.condition_key)


class Operations:
    """Maintenance bookkeeping shared by the API and CLI: event log, machine
    status, and the window boundaries the preprocessor must not span."""

    def __init__(self, store: TelemetryStore, alerts: AlertManager):
        self.store = store
        self.alerts = alerts
        self.maintenance: list[MaintenanceEvent] = []
        self.boundaries: dict[str, list[int]] = {}
        self.status: dict[str, MachineStatus] = {}
        self.on_maintenance = None  # callback(event) for journaling

    def machine_status(self, machine_id: str) -> MachineStatus:
        return self.status.get(machine_id, MachineStatus.RUNNING)

    def machine_boundaries(self, machine_id: str) -> list[int]:
        return sorted(self.boundaries.get(machine_id, []))

    def maintenance_log(self, machine_id: str | None = None) -> list[MaintenanceEvent]:
        if machine_id is None:
            return list(self.maintenance)
        return [e for e in self.maintenance if e.machine_id == machine_id]

    def record_maintenance(self, event: MaintenanceEvent, now_ms: int) -> MaintenanceEvent:
        """Log the event, resolve the machine's alerts, mark the boundary."""
        if not self.store.has_machine(event.machine_id):
            raise NotFoundError(f"unknown machine {event.machine_id!r}")
        if event.timestamp_ms > now_ms:
            raise InvalidArgumentError("maintenance timestamp is in the future")
        self.maintenance.append(event)
        self.boundaries.setdefault(event.machine_id, []).append(event.timestamp_ms)
        self.alerts.resolve_machine(event.machine_id, now_ms)
        self.status[event.machine_id] = MachineStatus.MAINTENANCE
        self.status[event.machine_id] = MachineStatus.RUNNING
        if self.on_maintenance is not None:
            self.on_maintenance(event)
        return event


# ── journals (same line-based family as the telemetry log) ────────────────


def _quote(text: str) -> str:
    return urllib.parse.quote(text, safe="")


def _unquote(text: str) -> str:
    return urllib.parse.unquote(text)


def format_maintenance_line(event: MaintenanceEvent) -> str:
    return (f"{event.timestamp_ms},{event.machine_id},"
            f"{_quote(event.performed_by)},{_quote(event.note)}\n")


def maintenance_header() -> str:
    return f"{MAINT_MAGIC} {FORMAT_VERSION}\n"


def load_maintenance_log(path: str) -> list[MaintenanceEvent]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise StorageError(f"cannot read maintenance log {path!r}: {exc}") from exc
    if not lines or not lines[0].startswith(f"{MAINT_MAGIC} {FORMAT_VERSION}"):
        raise LogFormatError(f"{path!r} is not a {MAINT_MAGIC} {FORMAT_VERSION} file")
    events = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 4:
            raise LogParseError(line_no, f"expected 4 fields, got {len(fields)}")
        try:
            ts = int(fields[0])
        except ValueError:
            raise LogParseError(line_no, f"bad timestamp {fields[0]!r}") from None
        events.append(MaintenanceEvent(
            machine_id=fields[1], timestamp_ms=ts,
            performed_by=_unquote(fields[2]), note=_unquote(fields[3])))
    return events


def format_alert_line(event: str, alert: Alert, at_ms: int) -> str:
    return (f"{at_ms},{alert.id},{event},{alert.machine_id},{alert.severity},"
            f"{_quote(alert.condition_key)},{_quote(alert.message)}\n")


def alerts_header() -> str:
    return f"{ALERTS_MAGIC} {FORMAT_VERSION}\n"


def load_alert_journal(path: str, manager: AlertManager) -> None:
    """Replay a transition journal into a manager (journaling suppressed)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise StorageError(f"cannot read alert journal {path!r}: {exc}") from exc
    if not lines or not lines[0].startswith(f"{ALERTS_MAGIC} {FORMAT_VERSION}"):
        raise LogFormatError(f"{path!r} is not a {ALERTS_MAGIC} {FORMAT_VERSION} file")
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 7:
            raise LogParseError(line_no, f"expected 7 fields, got {len(fields)}")
        try:
            at_ms = int(fields[0])
            alert_id = int(fields[1])
        except ValueError:
            raise LogParseError(line_no, "bad timestamp or alert id") from None
        event = fields[2]
        if event == "open":
            manager.restore(Alert(
                id=alert_id, machine_id=fields[3], severity=fields[4],
                created_at_ms=at_ms, state="open",
                condition_key=_unquote(fields[5]), message=_unquote(fields[6])))
        elif event in ("ack", "resolve"):
            try:
                manager.replay_transition(event, alert_id)
            except NotFoundError:
                raise LogParseError(line_no, f"{event} for unknown alert {alert_id}") from None
        else:
            raise LogParseError(line_no, f"unknown alert event {event!r}")
