"""Envelope evaluation, forecast-to-downtime conversion, alert lifecycle,
maintenance bookkeeping."""

import numpy as np
import pytest

import tubepdm.downtime as downtime_mod
from tubepdm.downtime import (
    Alert,
    AlertManager,
    MaintenanceEvent,
    OperatingEnvelope,
    Operations,
    Violation,
    alerts_header,
    evaluate_envelope,
    forecast_downtime,
    format_alert_line,
    format_maintenance_line,
    load_alert_journal,
    load_maintenance_log,
    maintenance_header,
)
from tubepdm.errors import InvalidArgumentError, NotFoundError
from tubepdm.forest import Forest, ForestConfig, TreeNode
from tubepdm.lstm import LstmParams
from tubepdm.params import EXTRUDER_PRESSURE, MACHINE_SPEED, ParameterSchema
from tubepdm.preprocess import NormalizationStats
from tubepdm.store import MachineStatus, SensorReading, SeriesFrame, TelemetryStore

SCHEMA = ParameterSchema(zones=1)  # 5 parameters
F = SCHEMA.size


def frame(ts, pressure, speed=100.0):
    values = [2.0, pressure, speed, 50.0, 200.0]
    return SeriesFrame(timestamp_ms=ts, values=tuple(values))


def envelope(lower=140.0, upper=160.0, sustain=3):
    return OperatingEnvelope(bounds={EXTRUDER_PRESSURE: (lower, upper)},
                             sustain_steps=sustain)


class TestEnvelopeType:
    def test_rejects_inverted_bounds(self):
        with pytest.raises(InvalidArgumentError):
            OperatingEnvelope(bounds={EXTRUDER_PRESSURE: (160.0, 140.0)})

    def test_rejects_zero_sustain(self):
        with pytest.raises(InvalidArgumentError):
            OperatingEnvelope(bounds={}, sustain_steps=0)


class TestEvaluateEnvelope:
    def test_all_in_bounds(self):
        frames = [frame(t, 150.0) for t in (0, 1000, 2000)]
        assert evaluate_envelope(frames, envelope(), SCHEMA) == []

    def test_sustained_violation_reports_onset(self):
        frames = [frame(0, 150.0), frame(1000, 165.0), frame(2000, 166.0),
                  frame(3000, 167.0)]
        violations = evaluate_envelope(frames, envelope(sustain=3), SCHEMA)
        assert len(violations) == 1
        assert violations[0].parameter == EXTRUDER_PRESSURE
        assert violations[0].onset_ms == 1000
        assert violations[0].value == 167.0

    def test_single_blip_not_reported(self):
        frames = [frame(0, 150.0), frame(1000, 165.0), frame(2000, 150.0),
                  frame(3000, 166.0)]
        assert evaluate_envelope(frames, envelope(sustain=3), SCHEMA) == []

    def test_run_must_end_at_latest_frame(self):
        frames = [frame(0, 165.0), frame(1000, 165.0), frame(2000, 165.0),
                  frame(3000, 150.0)]
        assert evaluate_envelope(frames, envelope(sustain=3), SCHEMA) == []

    def test_absent_value_breaks_run(self):
        broken = SeriesFrame(timestamp_ms=1000, values=(2.0, None, 100.0, 50.0, 200.0))
        frames = [frame(0, 165.0), broken, frame(2000, 165.0), frame(3000, 165.0)]
        assert evaluate_envelope(frames, envelope(sustain=3), SCHEMA) == []
        assert len(evaluate_envelope(frames, envelope(sustain=2), SCHEMA)) == 1

    def test_pure_function(self):
        frames = [frame(t, 170.0) for t in (0, 1000, 2000)]
        first = evaluate_envelope(frames, envelope(), SCHEMA)
        second = evaluate_envelope(frames, envelope(), SCHEMA)
        assert first == second


def zero_lstm(d=F):
    return LstmParams(
        d=d, h=2, out=d,
        Wi=np.zeros((2, d + 2)), Wf=np.zeros((2, d + 2)),
        Wo=np.zeros((2, d + 2)), Wg=np.zeros((2, d + 2)),
        bi=np.zeros(2), bf=np.zeros(2), bo=np.zeros(2), bg=np.zeros(2),
        Wy=np.zeros((d, 2)), by=np.zeros(d),
    )


def identity_stats(d=F):
    return NormalizationStats(mode="minmax", mins=np.zeros(d), maxs=np.ones(d))


def history(n=4):
    matrix = np.tile(np.array([2.0, 150.0, 100.0, 50.0, 200.0]), (n, 1))
    ts = 1000 * np.arange(n, dtype=np.int64)
    return matrix, ts


def leaf_forests(values):
    return [Forest(trees=[TreeNode(value=v)], config=ForestConfig(n_trees=1),
                   n_features=None or 4 * F) for v in values]


class TestForecastDowntime:
    def test_constant_in_bounds_no_downtime(self):
        params = zero_lstm()
        params.by[:] = [2.0, 150.0, 100.0, 50.0, 200.0]  # identity stats: raw units
        matrix, ts = history()
        forecast, steps = forecast_downtime(
            matrix, ts, "m1", params, identity_stats(), envelope(), 10, 1000, SCHEMA)
        assert forecast.predicted_down_at_ms is None
        assert forecast.lead_time_ms is None
        assert forecast.contributing_parameters == ()
        assert forecast.confidence == 1.0
        assert steps.shape == (10, F)

    def test_constant_out_of_bounds_flags_first_step(self):
        params = zero_lstm()
        params.by[:] = [2.0, 170.0, 100.0, 50.0, 200.0]
        matrix, ts = history()
        forecast, _ = forecast_downtime(
            matrix, ts, "m1", params, identity_stats(), envelope(), 10, 1000, SCHEMA)
        assert forecast.predicted_down_at_ms == ts[-1] + 1000
        assert forecast.lead_time_ms == 1000
        assert forecast.contributing_parameters == ((EXTRUDER_PRESSURE, 1),)

    def test_crossing_at_step_k(self, monkeypatch):
        """Forecast exits the envelope at step k and stays out."""
        k = 4
        steps = np.tile(np.array([2.0, 150.0, 100.0, 50.0, 200.0]), (10, 1))
        steps[k - 1:, 1] = 175.0
        monkeypatch.setattr(downtime_mod, "_roll_lstm", lambda p, w, h: steps)
        matrix, ts = history()
        forecast, _ = forecast_downtime(
            matrix, ts, "m1", zero_lstm(), identity_stats(), envelope(), 10, 1000, SCHEMA)
        assert forecast.predicted_down_at_ms == ts[-1] + k * 1000
        assert forecast.lead_time_ms == k * 1000

    def test_blip_shorter_than_sustain_ignored(self, monkeypatch):
        steps = np.tile(np.array([2.0, 150.0, 100.0, 50.0, 200.0]), (10, 1))
        steps[3:5, 1] = 175.0  # 2-step excursion, sustain 3
        monkeypatch.setattr(downtime_mod, "_roll_lstm", lambda p, w, h: steps)
        matrix, ts = history()
        forecast, _ = forecast_downtime(
            matrix, ts, "m1", zero_lstm(), identity_stats(), envelope(sustain=3),
            10, 1000, SCHEMA)
        assert forecast.predicted_down_at_ms is None

    def test_run_cut_by_horizon_not_counted(self, monkeypatch):
        steps = np.tile(np.array([2.0, 150.0, 100.0, 50.0, 200.0]), (10, 1))
        steps[8:, 1] = 175.0  # run of 2 at the end, sustain 3
        monkeypatch.setattr(downtime_mod, "_roll_lstm", lambda p, w, h: steps)
        matrix, ts = history()
        forecast, _ = forecast_downtime(
            matrix, ts, "m1", zero_lstm(), identity_stats(), envelope(sustain=3),
            10, 1000, SCHEMA)
        assert forecast.predicted_down_at_ms is None

    def test_ensemble_agreement_full_confidence(self):
        params = zero_lstm()
        params.by[:] = [2.0, 170.0, 100.0, 50.0, 200.0]
        # forests predict the same out-of-bounds constant (normalized = raw here)
        forests = leaf_forests([2.0, 170.0, 100.0, 50.0, 200.0])
        matrix, ts = history()
        forecast, _ = forecast_downtime(
            matrix, ts, "m1", params, identity_stats(), envelope(), 6, 1000, SCHEMA,
            forests=forests)
        assert forecast.predicted_down_at_ms is not None
        assert forecast.confidence == 1.0

    def test_ensemble_disagreement_halves_confidence(self):
        params = zero_lstm()
        params.by[:] = [2.0, 170.0, 100.0, 50.0, 200.0]
        forests = leaf_forests([2.0, 150.0, 100.0, 50.0, 200.0])  # forest: all fine
        matrix, ts = history()
        forecast, _ = forecast_downtime(
            matrix, ts, "m1", params, identity_stats(), envelope(), 6, 1000, SCHEMA,
            forests=forests)
        assert forecast.predicted_down_at_ms is not None
        assert forecast.confidence == 0.5

    def test_no_downtime_agreement(self):
        params = zero_lstm()
        params.by[:] = [2.0, 150.0, 100.0, 50.0, 200.0]
        forests = leaf_forests([2.0, 150.0, 100.0, 50.0, 200.0])
        matrix, ts = history()
        forecast, _ = forecast_downtime(
            matrix, ts, "m1", params, identity_stats(), envelope(), 6, 1000, SCHEMA,
            forests=forests)
        assert forecast.predicted_down_at_ms is None
        assert forecast.confidence == 1.0

    def test_predicted_never_before_generated(self, monkeypatch):
        steps = np.tile(np.array([2.0, 175.0, 100.0, 50.0, 200.0]), (5, 1))
        monkeypatch.setattr(downtime_mod, "_roll_lstm", lambda p, w, h: steps)
        matrix, ts = history()
        forecast, _ = forecast_downtime(
            matrix, ts, "m1", zero_lstm(), identity_stats(), envelope(sustain=1),
            5, 1000, SCHEMA)
        assert forecast.predicted_down_at_ms >= forecast.generated_at_ms

    def test_bad_horizon(self):
        matrix, ts = history()
        with pytest.raises(InvalidArgumentError):
            forecast_downtime(matrix, ts, "m1", zero_lstm(), identity_stats(),
                              envelope(), 0, 1000, SCHEMA)


class TestAlertManager:
    def violation(self, parameter=EXTRUDER_PRESSURE):
        return Violation(parameter=parameter, onset_ms=1000, value=170.0)

    def test_first_violation_opens_critical(self):
        mgr = AlertManager()
        alerts = mgr.sync_violations("m1", [self.violation()], now_ms=5000)
        assert len(alerts) == 1
        assert alerts[0].severity == "critical"
        assert alerts[0].state == "open"

    def test_duplicate_condition_no_second_alert(self):
        mgr = AlertManager()
        mgr.sync_violations("m1", [self.violation()], now_ms=5000)
        alerts = mgr.sync_violations("m1", [self.violation()], now_ms=6000)
        assert len(alerts) == 1

    def test_acknowledge_idempotent(self):
        mgr = AlertManager()
        (alert,) = mgr.sync_violations("m1", [self.violation()], now_ms=5000)
        first = mgr.acknowledge(alert.id, now_ms=5100)
        assert first.state == "acknowledged"
        second = mgr.acknowledge(alert.id, now_ms=5200)
        assert second.state == "acknowledged"

    def test_acknowledge_unknown_raises(self):
        mgr = AlertManager()
        with pytest.raises(NotFoundError):
            mgr.acknowledge(42, now_ms=0)

    def test_condition_clearing_resolves(self):
        mgr = AlertManager()
        mgr.sync_violations("m1", [self.violation()], now_ms=5000)
        alerts = mgr.sync_violations("m1", [], now_ms=6000)
        assert alerts[0].state == "resolved"

    def test_resolved_condition_can_reopen(self):
        mgr = AlertManager()
        mgr.sync_violations("m1", [self.violation()], now_ms=5000)
        mgr.sync_violations("m1", [], now_ms=6000)
        alerts = mgr.sync_violations("m1", [self.violation()], now_ms=7000)
        open_alerts = [a for a in alerts if a.state == "open"]
        assert len(open_alerts) == 1
        assert open_alerts[0].id != alerts[0].id or len(alerts) == 2

    def test_ack_after_resolution_is_noop(self):
        mgr = AlertManager()
        (alert,) = mgr.sync_violations("m1", [self.violation()], now_ms=5000)
        mgr.sync_violations("m1", [], now_ms=6000)
        after = mgr.acknowledge(alert.id, now_ms=7000)
        assert after.state == "resolved"

    def test_state_machine_never_reverses(self):
        """Brute force all call orders of {sync-on, ack, sync-off} and audit
        every observed transition."""
        legal = {("open", "acknowledged"), ("open", "resolved"),
                 ("acknowledged", "resolved")}
        import itertools

        for sequence in itertools.permutations(["on", "ack", "off", "on", "ack"], 5):
            mgr = AlertManager()
            seen: dict[int, str] = {}
            transitions = []

            def observe():
                for a in mgr.alerts():
                    prev = seen.get(a.id)
                    if prev is not None and prev != a.state:
                        transitions.append((prev, a.state))
                    seen[a.id] = a.state

            now = 0
            for op in sequence:
                now += 100
                if op == "on":
                    mgr.sync_violations("m1", [self.violation()], now)
                elif op == "off":
                    mgr.sync_violations("m1", [], now)
                else:
                    for a in mgr.alerts(state="open"):
                        mgr.acknowledge(a.id, now)
                observe()
            for t in transitions:
                assert t in legal, (sequence, t)

    def test_forecast_below_warning_threshold_opens_warning(self):
        from tubepdm.downtime import DowntimeForecast

        mgr = AlertManager()
        forecast = DowntimeForecast(
            machine_id="m1", generated_at_ms=10_000, predicted_down_at_ms=20_000,
            lead_time_ms=10_000, confidence=1.0,
            contributing_parameters=((EXTRUDER_PRESSURE, 3),))
        alerts = mgr.sync_forecast("m1", forecast, warning_lead_ms=30_000, now_ms=10_000)
        assert len(alerts) == 1
        assert alerts[0].severity == "warning"
        # forecast clearing resolves it
        clear = DowntimeForecast(
            machine_id="m1", generated_at_ms=11_000, predicted_down_at_ms=None,
            lead_time_ms=None, confidence=1.0, contributing_parameters=())
        alerts = mgr.sync_forecast("m1", clear, warning_lead_ms=30_000, now_ms=11_000)
        assert alerts[0].state == "resolved"

    def test_distant_forecast_no_warning(self):
        from tubepdm.downtime import DowntimeForecast

        mgr = AlertManager()
        forecast = DowntimeForecast(
            machine_id="m1", generated_at_ms=0, predicted_down_at_ms=100_000,
            lead_time_ms=100_000, confidence=1.0,
            contributing_parameters=((EXTRUDER_PRESSURE, 3),))
        assert mgr.sync_forecast("m1", forecast, warning_lead_ms=30_000, now_ms=0) == []


class TestJournals:
    def test_alert_journal_roundtrip(self, tmp_path):
        path = tmp_path / "alerts.log"
        lines = [alerts_header()]
        mgr = AlertManager(on_transition=lambda e, a, t: lines.append(
            format_alert_line(e, a, t)))
        mgr.sync_violations("m1", [Violation(EXTRUDER_PRESSURE, 1000, 170.0)], 5000)
        (alert,) = mgr.alerts()
        mgr.acknowledge(alert.id, 6000)
        mgr.sync_violations("m1", [], 7000)
        mgr.sync_violations("m1", [Violation(EXTRUDER_PRESSURE, 8000, 170.0)], 8000)
        path.write_text("".join(lines), encoding="utf-8")

        restored = AlertManager()
        load_alert_journal(str(path), restored)
        assert [(a.id, a.state) for a in restored.alerts()] == \
            [(a.id, a.state) for a in mgr.alerts()]
        # dedup map restored: re-reporting does not reopen
        before = len(restored.alerts())
        restored.sync_violations("m1", [Violation(EXTRUDER_PRESSURE, 8000, 170.0)], 9000)
        assert len(restored.alerts()) == before

    def test_maintenance_log_roundtrip(self, tmp_path):
        events = [
            MaintenanceEvent("m1", 1000, "replaced belt, greased", "op-7"),
            MaintenanceEvent("m2", 2000, "note, with commas", "someone else"),
        ]
        path = tmp_path / "maint.log"
        path.write_text(maintenance_header()
                        + "".join(format_maintenance_line(e) for e in events),
                        encoding="utf-8")
        assert load_maintenance_log(str(path)) == events


class TestOperations:
    def _ops(self):
        store = TelemetryStore(SCHEMA)
        store.append(SensorReading("m1", 1000, EXTRUDER_PRESSURE, 150.0))
        return Operations(store, AlertManager())

    def test_maintenance_resolves_open_alerts(self):
        ops = self._ops()
        ops.alerts.sync_violations(
            "m1",
            [Violation(EXTRUDER_PRESSURE, 0, 170.0), Violation(MACHINE_SPEED, 0, 5.0)],
            100)
        assert len(ops.alerts.alerts("m1", state="open")) == 2
        ops.record_maintenance(MaintenanceEvent("m1", 900, "fixed", "op"), now_ms=1000)
        assert ops.alerts.alerts("m1", state="open") == []
        assert all(a.state == "resolved" for a in ops.alerts.alerts("m1"))

    def test_event_queryable_and_boundary_registered(self):
        ops = self._ops()
        event = MaintenanceEvent("m1", 900, "fixed", "op")
        ops.record_maintenance(event, now_ms=1000)
        assert ops.maintenance_log("m1") == [event]
        assert ops.machine_boundaries("m1") == [900]
        assert ops.machine_status("m1") == MachineStatus.RUNNING

    def test_unknown_machine(self):
        ops = self._ops()
        with pytest.raises(NotFoundError):
            ops.record_maintenance(MaintenanceEvent("ghost", 0, "x", "y"), now_ms=10)

    def test_future_timestamp_rejected(self):
        ops = self._ops()
        with pytest.raises(InvalidArgumentError):
            ops.record_maintenance(MaintenanceEvent("m1", 5000, "x", "y"), now_ms=1000)

    def test_windows_never_span_recorded_boundary(self):
        from tubepdm.preprocess import make_windows

        ops = self._ops()
        ops.record_maintenance(MaintenanceEvent("m1", 900, "fixed", "op"), now_ms=1000)
        matrix = np.zeros((10, 2))
        ts = np.arange(10, dtype=np.int64) * 200  # boundary at 900 falls mid-series
        ds = make_windows(matrix, ts, 3, 1, 1, ops.machine_boundaries("m1"))
        for target_ts in ds.timestamps:
            first_ts = target_ts - 3 * 200
            assert not (first_ts < 900 <= target_ts)
