"""Pipeline driver: simulate, replay, train, evaluate, forecast, serve.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 runtime failure.
Long operations report progress on stderr; results and reports go to stdout
or the requested output files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from .bundle import ModelBundle, load_bundle, save_bundle
from .config import (
    envelope_from,
    forest_config_from,
    load_config_file,
    pipeline_config_from,
    server_config_from,
    sim_config_from,
    train_config_from,
)
from .downtime import load_maintenance_log
from .errors import ConfigError, StorageError, TubePdmError
from .pipeline import (
    PipelineConfig,
    forecast_for_machine,
    forest_validation_mse,
    lstm_validation_mse,
    persistence_mse,
    prepare_dataset,
    train_forests,
    train_lstm,
)
from .preprocess import pearson_matrix
from .sim import generate
from .store import TelemetryStore, load_log

TELEMETRY_LOG = "telemetry.log"
MAINT_LOG = "maintenance.log"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2; we use 1
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="tubepdm", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("simulate", help="generate synthetic machine telemetry")
    p.add_argument("--config", help="config file with the sim.* section")
    p.add_argument("--duration-ms", type=int, required=True)
    p.add_argument("--out", required=True, help="output telemetry log file")

    p = sub.add_parser("replay", help="feed a telemetry log into a store dir or server")
    p.add_argument("--file", required=True, help="telemetry log to replay")
    p.add_argument("--target", required=True,
                   help="store directory or server base URL (http://...)")
    p.add_argument("--rate", type=float, default=0.0,
                   help="readings per second; 0 = unthrottled")
    p.add_argument("--batch-size", type=int, default=500)

    p = sub.add_parser("train", help="train the forecasting models")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--model-out", required=True, help="bundle output directory")
    p.add_argument("--config", help="config file with pipeline.*/train.* sections")
    p.add_argument("--report-out", help="training curve CSV (default: <model-out>/train_report.csv)")
    p.add_argument("--machine", help="machine id (required when the log has several)")

    p = sub.add_parser("evaluate", help="validation MSE: model vs persistence baseline")
    p.add_argument("--model", required=True, help="bundle directory")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--config", help="config file (pipeline section must match training)")
    p.add_argument("--report-out", help="write metric,value CSV here")
    p.add_argument("--machine")

    p = sub.add_parser("forecast", help="predict downtime from the latest window")
    p.add_argument("--model", required=True, help="bundle directory")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--config", help="config file with the envelope.* section")
    p.add_argument("--horizon-steps", type=int, default=64)
    p.add_argument("--machine")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--config", help="config file with the server.* section")

    return parser


def _load_config(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file {path!r} does not exist")
    return load_config_file(path)


def _open_data_dir(data_dir: str) -> TelemetryStore:
    log_path = os.path.join(data_dir, TELEMETRY_LOG)
    if not os.path.exists(log_path):
        raise StorageError(f"{log_path!r} does not exist; replay telemetry first")
    return load_log(log_path)


def _pick_machine(store: TelemetryStore, requested: str | None) -> str:
    machines = store.machines()
    if requested:
        if requested not in machines:
            raise StorageError(f"machine {requested!r} not in the data (have {machines})")
        return requested
    if len(machines) == 1:
        return machines[0]
    raise ConfigError(f"data contains several machines {machines}; pass --machine")


def _boundaries(data_dir: str, machine_id: str) -> list[int]:
    path = os.path.join(data_dir, MAINT_LOG)
    if not os.path.exists(path):
        return []
    return sorted(e.timestamp_ms for e in load_maintenance_log(path)
                  if e.machine_id == machine_id)


def cmd_simulate(args) -> int:
    data = _load_config(args.config)
    cfg = sim_config_from(data)
    envelope = envelope_from(data)
    run = generate(cfg, args.duration_ms, envelope=envelope)
    store = TelemetryStore(cfg.schema)
    for reading in run.readings:
        store.append(reading)
    count = store.save_log(args.out)
    truth = "none" if run.ground_truth_down_at is None else str(run.ground_truth_down_at)
    print(f"readings={count} machine={cfg.machine_id} ground_truth_down_at_ms={truth}")
    return 0


def cmd_replay(args) -> int:
    if not os.path.exists(args.file):
        raise StorageError(f"{args.file!r} does not exist")
    source = load_log(args.file)
    readings = []
    for machine_id in source.machines():
        for parameter in source.schema.parameters():
            readings.extend(source.query_all(machine_id, parameter))
    readings.sort(key=lambda r: (r.timestamp_ms, r.machine_id, r.parameter))

    if args.target.startswith(("http://", "https://")):
        import httpx

        accepted = rejected = 0
        with httpx.Client(base_url=args.target, timeout=30.0) as client:
            for lo in range(0, len(readings), args.batch_size):
                batch = readings[lo:lo + args.batch_size]
                payload = {"readings": [
                    {"timestamp_ms": r.timestamp_ms, "machine_id": r.machine_id,
                     "parameter": r.parameter, "value": r.value} for r in batch]}
                response = client.post("/api/v1/readings", json=payload)
                if response.status_code != 200:
                    raise StorageError(f"server rejected batch: {response.text}")
                body = response.json()
                accepted += body["accepted"]
                rejected += body["rejected"]
                if args.rate > 0:
                    time.sleep(len(batch) / args.rate)
                print(f"sent {lo + len(batch)}/{len(readings)}", file=sys.stderr)
        print(f"accepted={accepted} rejected={rejected}")
    else:
        os.makedirs(args.target, exist_ok=True)
        log_path = os.path.join(args.target, TELEMETRY_LOG)
        store = load_log(log_path) if os.path.exists(log_path) else TelemetryStore(source.schema)
        for reading in readings:
            store.append(reading)
        count = store.save_log(log_path)
        print(f"stored={count} path={log_path}")
    return 0


def cmd_train(args) -> int:
    data = _load_config(args.config)
    pipeline_cfg = pipeline_config_from(data)
    train_cfg = train_config_from(data)
    forest_cfg = forest_config_from(data)

    store = _open_data_dir(args.data_dir)
    machine_id = _pick_machine(store, args.machine)
    boundaries = _boundaries(args.data_dir, machine_id)
    prepared = prepare_dataset(store, machine_id, pipeline_cfg, boundaries)
    print(f"training on {prepared.train.n_samples} windows "
          f"(validation {prepared.validation.n_samples})", file=sys.stderr)

    report = train_lstm(prepared, train_cfg)
    print(f"lstm trained in {report.wall_time_s:.1f}s "
          f"final_train_mse={report.train_mse[-1]:.6g}", file=sys.stderr)
    forests = train_forests(prepared, forest_cfg) if forest_cfg else None
    if forests:
        print(f"fitted {len(forests)} forests x {forest_cfg.n_trees} trees", file=sys.stderr)

    bundle = ModelBundle(
        lstm=report.params, stats=prepared.stats,
        window_len=pipeline_cfg.window_len, horizon=pipeline_cfg.horizon,
        stride=pipeline_cfg.stride, period_ms=pipeline_cfg.period_ms,
        zones=store.schema.zones, forests=forests)
    save_bundle(bundle, args.model_out)

    report_path = args.report_out or os.path.join(args.model_out, "train_report.csv")
    with open(report_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(report.to_csv())

    # parameter correlation snapshot for offline inspection
    correlation = pearson_matrix(prepared.matrix_raw, store.schema.parameters())
    with open(os.path.join(args.model_out, "correlation.csv"), "w",
              encoding="utf-8", newline="") as fh:
        fh.write(correlation.to_csv())

    final_val = report.validation_mse[-1] if report.validation_mse else float("nan")
    print(f"model={args.model_out} report={report_path} "
          f"train_mse={report.train_mse[-1]!r} validation_mse={final_val!r}")
    return 0


def _rebuild(args):
    data = _load_config(args.config)
    bundle = load_bundle(args.model)
    store = _open_data_dir(args.data_dir)
    machine_id = _pick_machine(store, args.machine)
    pipeline_cfg = pipeline_config_from(data)
    pipeline_cfg = PipelineConfig(
        period_ms=bundle.period_ms, window_len=bundle.window_len,
        horizon=bundle.horizon, stride=bundle.stride,
        train_fraction=pipeline_cfg.train_fraction,
        normalization=pipeline_cfg.normalization, cleaning=pipeline_cfg.cleaning)
    return data, bundle, store, machine_id, pipeline_cfg


def cmd_evaluate(args) -> int:
    _, bundle, store, machine_id, pipeline_cfg = _rebuild(args)
    boundaries = _boundaries(args.data_dir, machine_id)
    prepared = prepare_dataset(store, machine_id, pipeline_cfg, boundaries)
    lstm_mse = lstm_validation_mse(prepared, bundle.lstm)
    split = prepared.validation if prepared.validation.n_samples else prepared.train
    baseline = persistence_mse(split)
    lines = [("lstm_mse", lstm_mse)]
    if bundle.forests:
        lines.append(("forest_mse", forest_validation_mse(prepared, bundle.forests)))
    lines.append(("persistence_mse", baseline))
    for name, value in lines:
        print(f"{name}={value!r}")
    if args.report_out:
        with open(args.report_out, "w", encoding="utf-8", newline="") as fh:
            fh.write("metric,value\n")
            for name, value in lines:
                fh.write(f"{name},{value!r}\n")
    return 0


def cmd_forecast(args) -> int:
    data, bundle, store, machine_id, _ = _rebuild(args)
    envelope = envelope_from(data)
    if envelope is None:
        raise ConfigError("forecast needs envelope.bounds.* in the config file")
    forecast, steps_raw, step_ts = forecast_for_machine(
        store, machine_id, bundle, envelope, args.horizon_steps)
    parameters = store.schema.parameters()
    out = {
        "machine_id": forecast.machine_id,
        "generated_at_ms": forecast.generated_at_ms,
        "predicted_down_at_ms": forecast.predicted_down_at_ms,
        "lead_time_ms": forecast.lead_time_ms,
        "confidence": forecast.confidence,
        "contributing_parameters": [
            {"parameter": p, "first_out_of_bounds_step": s}
            for p, s in forecast.contributing_parameters],
        "steps": [
            {"timestamp_ms": int(t), "values": dict(zip(parameters, map(float, row)))}
            for t, row in zip(step_ts, steps_raw)],
    }
    print(json.dumps(out, indent=2))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    data = _load_config(args.config)
    server_cfg = server_config_from(data)
    app = create_app(server_cfg)
    print(f"listening on {server_cfg.listen_addr} (data: {server_cfg.data_dir})",
          file=sys.stderr)
    uvicorn.run(app, host=server_cfg.host, port=server_cfg.port, log_level="warning")
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "replay": cmd_replay,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "forecast": cmd_forecast,
    "serve": cmd_serve,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, StorageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TubePdmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 3
    except Exception as exc:  # anything unexpected is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
