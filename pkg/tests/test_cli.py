"""Command-line pipeline: exit codes, stage wiring, report artifacts."""

import json
import os

import numpy as np
import pytest

from tubepdm.cli import run

CONFIG = """
# synthetic machine for pipeline tests
sim.machine_id = tube-01
sim.seed = 7
sim.sample_period_ms = 1000
sim.zones = 2
sim.noise.machine_speed = 0.3
sim.modulation.0.parameter = machine_speed
sim.modulation.0.amplitude = 3.0
sim.modulation.0.period_ms = 20000

pipeline.window_len = 8
pipeline.train_fraction = 0.8

train.epochs = 3
train.hidden_size = 8
train.batch_size = 16
train.seed = 5
train.forest.n_trees = 2
train.forest.max_depth = 3
train.forest.features_per_split = 8

envelope.bounds.machine_speed = 80, 120
envelope.sustain_steps = 2
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "pdm.conf"
    path.write_text(CONFIG, encoding="utf-8")
    return str(path)


def test_no_arguments_usage_exit_1(capsys):
    assert run([]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_subcommand_exit_1(capsys):
    assert run(["frobnicate"]) == 1


def test_missing_required_option_exit_1(capsys):
    assert run(["simulate", "--out", "x.log"]) == 1


def test_bad_config_key_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.conf"
    bad.write_text("sim.tpyo = 1\n", encoding="utf-8")
    code = run(["simulate", "--config", str(bad), "--duration-ms", "1000",
                "--out", str(tmp_path / "o.log")])
    assert code == 2
    assert "unknown config key" in capsys.readouterr().err


def test_missing_data_dir_exit_2(tmp_path, capsys):
    code = run(["train", "--data-dir", str(tmp_path / "nope"),
                "--model-out", str(tmp_path / "model")])
    assert code == 2


def test_simulate_deterministic(tmp_path, config_path, capsys):
    a = tmp_path / "a.log"
    b = tmp_path / "b.log"
    assert run(["simulate", "--config", config_path, "--duration-ms", "30000",
                "--out", str(a)]) == 0
    assert run(["simulate", "--config", config_path, "--duration-ms", "30000",
                "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    out = capsys.readouterr().out
    assert "readings=" in out


def test_full_pipeline(tmp_path, config_path, capsys):
    """simulate -> replay -> train -> evaluate -> forecast on tiny settings."""
    log = str(tmp_path / "sim.log")
    data_dir = str(tmp_path / "data")
    model_dir = str(tmp_path / "model")
    report = str(tmp_path / "report.csv")

    assert run(["simulate", "--config", config_path, "--duration-ms", "120000",
                "--out", log]) == 0
    assert run(["replay", "--file", log, "--target", data_dir]) == 0
    assert os.path.exists(os.path.join(data_dir, "telemetry.log"))

    assert run(["train", "--data-dir", data_dir, "--model-out", model_dir,
                "--config", config_path, "--report-out", report]) == 0
    assert os.path.exists(os.path.join(model_dir, "lstm.pdml"))
    assert os.path.exists(os.path.join(model_dir, "norm.json"))
    assert os.path.exists(os.path.join(model_dir, "meta.json"))

    # report has exactly `epochs` data rows with monotone epoch indices
    lines = open(report, encoding="utf-8").read().strip().split("\n")
    assert lines[0] == "epoch,train_mse,validation_mse"
    assert len(lines) == 1 + 3
    epochs = [int(line.split(",")[0]) for line in lines[1:]]
    assert epochs == [1, 2, 3]
    for line in lines[1:]:
        _, train_mse, val_mse = line.split(",")
        assert np.isfinite(float(train_mse))
        assert np.isfinite(float(val_mse))

    capsys.readouterr()
    assert run(["evaluate", "--model", model_dir, "--data-dir", data_dir,
                "--config", config_path]) == 0
    out = capsys.readouterr().out
    metrics = dict(line.split("=") for line in out.strip().split("\n"))
    assert set(metrics) == {"lstm_mse", "forest_mse", "persistence_mse"}
    for v in metrics.values():
        assert np.isfinite(float(v))

    capsys.readouterr()
    assert run(["forecast", "--model", model_dir, "--data-dir", data_dir,
                "--config", config_path, "--horizon-steps", "5"]) == 0
    body = json.loads(capsys.readouterr().out)
    assert body["machine_id"] == "tube-01"
    assert body["confidence"] in (0.5, 1.0)
    assert len(body["steps"]) == 5


def test_evaluate_persistence_matches_direct_formula(tmp_path, config_path, capsys):
    from tubepdm.config import load_config_file, pipeline_config_from
    from tubepdm.pipeline import prepare_dataset
    from tubepdm.store import load_log

    log = str(tmp_path / "sim.log")
    data_dir = str(tmp_path / "data")
    model_dir = str(tmp_path / "model")
    assert run(["simulate", "--config", config_path, "--duration-ms", "100000",
                "--out", log]) == 0
    assert run(["replay", "--file", log, "--target", data_dir]) == 0
    assert run(["train", "--data-dir", data_dir, "--model-out", model_dir,
                "--config", config_path]) == 0
    capsys.readouterr()
    assert run(["evaluate", "--model", model_dir, "--data-dir", data_dir,
                "--config", config_path]) == 0
    printed = dict(line.split("=")
                   for line in capsys.readouterr().out.strip().split("\n"))

    # independent route: rebuild the dataset and apply the formula directly
    store = load_log(os.path.join(data_dir, "telemetry.log"))
    cfg = pipeline_config_from(load_config_file(config_path))
    prepared = prepare_dataset(store, "tube-01", cfg)
    split = prepared.validation
    expected = float(np.mean((split.inputs[:, -1, :] - split.targets) ** 2))
    assert float(printed["persistence_mse"]) == pytest.approx(expected, rel=1e-12)


def test_train_deterministic(tmp_path, config_path):
    log = str(tmp_path / "sim.log")
    data_dir = str(tmp_path / "data")
    assert run(["simulate", "--config", config_path, "--duration-ms", "80000",
                "--out", log]) == 0
    assert run(["replay", "--file", log, "--target", data_dir]) == 0
    m1, m2 = str(tmp_path / "m1"), str(tmp_path / "m2")
    assert run(["train", "--data-dir", data_dir, "--model-out", m1,
                "--config", config_path]) == 0
    assert run(["train", "--data-dir", data_dir, "--model-out", m2,
                "--config", config_path]) == 0
    a = open(os.path.join(m1, "lstm.pdml"), "rb").read()
    b = open(os.path.join(m2, "lstm.pdml"), "rb").read()
    assert a == b
    fa = open(os.path.join(m1, "forest_00.pdmf"), "rb").read()
    fb = open(os.path.join(m2, "forest_00.pdmf"), "rb").read()
    assert fa == fb


def test_replay_merges_idempotently(tmp_path, config_path):
    log = str(tmp_path / "sim.log")
    data_dir = str(tmp_path / "data")
    assert run(["simulate", "--config", config_path, "--duration-ms", "20000",
                "--out", log]) == 0
    assert run(["replay", "--file", log, "--target", data_dir]) == 0
    first = open(os.path.join(data_dir, "telemetry.log"), "rb").read()
    # replaying the same file again changes nothing (last-write-wins dedup)
    assert run(["replay", "--file", log, "--target", data_dir]) == 0
    second = open(os.path.join(data_dir, "telemetry.log"), "rb").read()
    assert first == second
