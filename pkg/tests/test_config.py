"""Key-value config parsing and section loaders."""

import pytest

from tubepdm.config import (
    envelope_from,
    forest_config_from,
    parse_kv,
    pipeline_config_from,
    server_config_from,
    sim_config_from,
    train_config_from,
)
from tubepdm.errors import ConfigError


def test_parse_basics():
    data = parse_kv("""
# comment
sim.seed = 42

sim.machine_id = tube-01
""")
    assert data == {"sim.seed": "42", "sim.machine_id": "tube-01"}


def test_unknown_key_rejected():
    with pytest.raises(ConfigError) as err:
        parse_kv("sim.sede = 42\n")
    assert "unknown config key" in str(err.value)


def test_missing_equals_rejected():
    with pytest.raises(ConfigError):
        parse_kv("sim.seed 42\n")


def test_duplicate_key_last_wins():
    data = parse_kv("sim.seed = 1\nsim.seed = 2\n")
    assert data["sim.seed"] == "2"


def test_sim_config_sections():
    cfg = sim_config_from(parse_kv("""
sim.machine_id = m-9
sim.seed = 3
sim.sample_period_ms = 500
sim.zones = 2
sim.baseline.extruder_pressure = 140.0
sim.noise.extruder_pressure = 0.5
sim.modulation.0.parameter = machine_speed
sim.modulation.0.amplitude = 2.0
sim.modulation.0.period_ms = 10000
sim.drift.0.parameter = extruder_pressure
sim.drift.0.mode = linear
sim.drift.0.rate_per_ms = 0.001
sim.drift.0.start_ms = 5000
sim.maintenance_resets = 10000, 20000
"""))
    assert cfg.machine_id == "m-9"
    assert cfg.sample_period_ms == 500
    assert cfg.zones == 2
    assert cfg.baseline("extruder_pressure") == 140.0
    assert cfg.sigma("extruder_pressure") == 0.5
    assert cfg.modulations[0].period_ms == 10000
    assert cfg.drifts[0].rate == 0.001
    assert cfg.drifts[0].start_ms == 5000
    assert cfg.maintenance_resets == [10000, 20000]


def test_bad_number_reports_key():
    with pytest.raises(ConfigError) as err:
        sim_config_from(parse_kv("sim.seed = abc\n"))
    assert "sim.seed" in str(err.value)


def test_pipeline_and_train_defaults():
    pipeline = pipeline_config_from({})
    assert pipeline.window_len == 32
    assert pipeline.train_fraction == 0.8
    train = train_config_from({})
    assert train.epochs == 200
    assert train.optimizer == "adam"
    assert train.gradient_clip_norm == 5.0


def test_clip_zero_disables():
    train = train_config_from(parse_kv("train.gradient_clip_norm = 0\n"))
    assert train.gradient_clip_norm is None


def test_forest_disable():
    assert forest_config_from(parse_kv("train.forest.enabled = false\n")) is None
    cfg = forest_config_from(parse_kv("train.forest.n_trees = 5\n"))
    assert cfg.n_trees == 5


def test_envelope_section():
    env = envelope_from(parse_kv("""
envelope.sustain_steps = 2
envelope.bounds.extruder_pressure = 140, 160
"""))
    assert env.sustain_steps == 2
    assert env.bounds["extruder_pressure"] == (140.0, 160.0)
    assert envelope_from({}) is None


def test_envelope_bad_bounds():
    with pytest.raises(ConfigError):
        envelope_from(parse_kv("envelope.bounds.extruder_pressure = 140\n"))


def test_server_env_overrides():
    data = parse_kv("""
server.listen_addr = 0.0.0.0:9000
server.data_dir = /tmp/x
server.poll_interval_ms = 750
""")
    cfg = server_config_from(data, env={})
    assert cfg.listen_addr == "0.0.0.0:9000"
    assert cfg.poll_interval_ms == 750
    overridden = server_config_from(data, env={
        "PDM_LISTEN_ADDR": "127.0.0.1:1234",
        "PDM_DATA_DIR": "/tmp/y",
        "PDM_MODEL_PATH": "/tmp/model",
    })
    assert overridden.listen_addr == "127.0.0.1:1234"
    assert overridden.data_dir == "/tmp/y"
    assert overridden.model_path == "/tmp/model"
    assert overridden.host == "127.0.0.1"
    assert overridden.port == 1234
