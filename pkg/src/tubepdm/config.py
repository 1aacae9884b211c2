"""Key-value config files.

One flat `key = value` per line, `#` comments, dotted keys for structure,
indexed keys (`sim.drift.0.rate_per_ms`) for lists. The same file can carry
the simulator, pipeline, training, envelope, and server sections; each loader
reads its own prefix. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

from .downtime import DEFAULT_SUSTAIN_STEPS, DEFAULT_WARNING_LEAD_PERIODS, OperatingEnvelope
from .errors import ConfigError
from .forest import ForestConfig
from .lstm import TrainConfig
from .pipeline import PipelineConfig
from .preprocess import CleaningConfig
from .sim import DriftProfile, InjectedFailure, Modulation, SimConfig

ENV_LISTEN_ADDR = "PDM_LISTEN_ADDR"
ENV_DATA_DIR = "PDM_DATA_DIR"
ENV_MODEL_PATH = "PDM_MODEL_PATH"

_KEY_PATTERNS = [
    r"sim\.machine_id", r"sim\.seed", r"sim\.sample_period_ms", r"sim\.zones",
    r"sim\.baseline\.[a-z_0-9]+", r"sim\.noise\.[a-z_0-9]+",
    r"sim\.modulation\.\d+\.(parameter|amplitude|period_ms|phase_rad)",
    r"sim\.drift\.\d+\.(parameter|mode|rate_per_ms|start_ms|tau_ms)",
    r"sim\.failure\.(parameter|time_ms)",
    r"sim\.maintenance_resets",
    r"pipeline\.(period_ms|window_len|horizon|stride|train_fraction|normalization|outlier_z|max_gap)",
    r"train\.(epochs|learning_rate|optimizer|batch_size|seed|hidden_size|gradient_clip_norm)",
    r"train\.forest\.(enabled|n_trees|max_depth|min_samples_leaf|features_per_split)",
    r"envelope\.sustain_steps", r"envelope\.warning_lead_periods",
    r"envelope\.bounds\.[a-z_0-9]+",
    r"server\.(listen_addr|data_dir|model_path|poll_interval_ms|machine_zones|ui_dir)",
]
_KEY_RE = re.compile("^(" + "|".join(_KEY_PATTERNS) + ")$")


def parse_kv(text: str) -> dict[str, str]:
    """Parse `key = value` lines; later duplicates win."""
    out: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not _KEY_RE.match(key):
            raise ConfigError(f"line {line_no}: unknown config key {key!r}")
        out[key] = value.strip()
    return out


def load_config_file(path: str) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_kv(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc


def _get_float(data: dict, key: str, default: float | None = None) -> float | None:
    if key not in data:
        return default
    try:
        return float(data[key])
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {data[key]!r}") from None


def _get_int(data: dict, key: str, default: int | None = None) -> int | None:
    if key not in data:
        return default
    try:
        return int(data[key])
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {data[key]!r}") from None


def _get_bool(data: dict, key: str, default: bool) -> bool:
    if key not in data:
        return default
    token = data[key].lower()
    if token in ("true", "yes", "1", "on"):
        return True
    if token in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {data[key]!r}")


def _indexed(data: dict, prefix: str) -> list[dict[str, str]]:
    groups: dict[int, dict[str, str]] = {}
    pattern = re.compile(re.escape(prefix) + r"\.(\d+)\.([a-z_]+)$")
    for key, value in data.items():
        m = pattern.match(key)
        if m:
            groups.setdefault(int(m.group(1)), {})[m.group(2)] = value
    return [groups[i] for i in sorted(groups)]


def sim_config_from(data: dict[str, str]) -> SimConfig:
    baselines = {}
    noise = {}
    for key, value in data.items():
        if key.startswith("sim.baseline."):
            baselines[key.removeprefix("sim.baseline.")] = _get_float(data, key)
        elif key.startswith("sim.noise."):
            noise[key.removeprefix("sim.noise.")] = _get_float(data, key)
    modulations = []
    for group in _indexed(data, "sim.modulation"):
        try:
            modulations.append(Modulation(
                parameter=group["parameter"], amplitude=float(group["amplitude"]),
                period_ms=float(group["period_ms"]),
                phase_rad=float(group.get("phase_rad", "0"))))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad sim.modulation entry: {exc}") from None
    drifts = []
    for group in _indexed(data, "sim.drift"):
        try:
            drifts.append(DriftProfile(
                parameter=group["parameter"], mode=group["mode"],
                rate=float(group["rate_per_ms"]),
                start_ms=int(group.get("start_ms", "0")),
                tau_ms=float(group.get("tau_ms", "60000"))))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad sim.drift entry: {exc}") from None
    failure = None
    if "sim.failure.parameter" in data:
        failure = InjectedFailure(parameter=data["sim.failure.parameter"],
                                  time_ms=_get_int(data, "sim.failure.time_ms", 0))
    resets = []
    if "sim.maintenance_resets" in data and data["sim.maintenance_resets"]:
        try:
            resets = [int(tok.strip()) for tok in data["sim.maintenance_resets"].split(",")]
        except ValueError:
            raise ConfigError("sim.maintenance_resets: expected comma-separated integers") from None
    return SimConfig(
        machine_id=data.get("sim.machine_id", "tube-01"),
        rng_seed=_get_int(data, "sim.seed", 0),
        sample_period_ms=_get_int(data, "sim.sample_period_ms", 1000),
        zones=_get_int(data, "sim.zones", 4),
        baselines=baselines, noise_sigma=noise,
        modulations=modulations, drifts=drifts,
        injected_failure=failure, maintenance_resets=resets,
    )


def pipeline_config_from(data: dict[str, str]) -> PipelineConfig:
    return PipelineConfig(
        period_ms=_get_int(data, "pipeline.period_ms", 1000),
        window_len=_get_int(data, "pipeline.window_len", 32),
        horizon=_get_int(data, "pipeline.horizon", 1),
        stride=_get_int(data, "pipeline.stride", 1),
        train_fraction=_get_float(data, "pipeline.train_fraction", 0.8),
        normalization=data.get("pipeline.normalization", "minmax"),
        cleaning=CleaningConfig(
            outlier_z=_get_float(data, "pipeline.outlier_z", 4.0),
            max_gap=_get_int(data, "pipeline.max_gap", 5)),
    )


def train_config_from(data: dict[str, str]) -> TrainConfig:
    clip = _get_float(data, "train.gradient_clip_norm", 5.0)
    return TrainConfig(
        epochs=_get_int(data, "train.epochs", 200),
        learning_rate=_get_float(data, "train.learning_rate", 1e-3),
        optimizer=data.get("train.optimizer", "adam"),
        batch_size=_get_int(data, "train.batch_size", 32),
        rng_seed=_get_int(data, "train.seed", 0),
        hidden_size=_get_int(data, "train.hidden_size", 32),
        gradient_clip_norm=None if clip == 0 else clip,
    )


def forest_config_from(data: dict[str, str]) -> ForestConfig | None:
    if not _get_bool(data, "train.forest.enabled", True):
        return None
    features = data.get("train.forest.features_per_split", "all")
    return ForestConfig(
        n_trees=_get_int(data, "train.forest.n_trees", 8),
        max_depth=_get_int(data, "train.forest.max_depth", 6),
        min_samples_leaf=_get_int(data, "train.forest.min_samples_leaf", 2),
        features_per_split="all" if features == "all" else int(features),
        bootstrap=True,
        rng_seed=_get_int(data, "train.seed", 0),
        task="regression",
    )


def envelope_from(data: dict[str, str]) -> OperatingEnvelope | None:
    bounds = {}
    for key, value in data.items():
        if not key.startswith("envelope.bounds."):
            continue
        parameter = key.removeprefix("envelope.bounds.")
        parts = [tok.strip() for tok in value.split(",")]
        if len(parts) != 2:
            raise ConfigError(f"{key}: expected 'lower, upper', got {value!r}")
        try:
            bounds[parameter] = (float(parts[0]), float(parts[1]))
        except ValueError:
            raise ConfigError(f"{key}: expected numbers, got {value!r}") from None
    if not bounds:
        return None
    return OperatingEnvelope(
        bounds=bounds,
        sustain_steps=_get_int(data, "envelope.sustain_steps", DEFAULT_SUSTAIN_STEPS))


@dataclass
class ServerConfig:
    listen_addr: str = "127.0.0.1:8000"
    data_dir: str = "./pdm-data"
    model_path: str | None = None
    poll_interval_ms: int = 2000
    machine_zones: int = 4
    ui_dir: str | None = None
    envelope: OperatingEnvelope | None = None
    warning_lead_periods: int = DEFAULT_WARNING_LEAD_PERIODS

    @property
    def host(self) -> str:
        return self.listen_addr.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        try:
            return int(self.listen_addr.rsplit(":", 1)[1])
        except (IndexError, ValueError):
            raise ConfigError(f"listen_addr {self.listen_addr!r} must be host:port") from None


def server_config_from(data: dict[str, str], env: dict[str, str] | None = None) -> ServerConfig:
    """File values with PDM_LISTEN_ADDR / PDM_DATA_DIR / PDM_MODEL_PATH overrides."""
    env = os.environ if env is None else env
    return ServerConfig(
        listen_addr=env.get(ENV_LISTEN_ADDR) or data.get("server.listen_addr", "127.0.0.1:8000"),
        data_dir=env.get(ENV_DATA_DIR) or data.get("server.data_dir", "./pdm-data"),
        model_path=env.get(ENV_MODEL_PATH) or data.get("server.model_path"),
        poll_interval_ms=_get_int(data, "server.poll_interval_ms", 2000),
        machine_zones=_get_int(data, "server.machine_zones", 4),
        ui_dir=data.get("server.ui_dir"),
        envelope=envelope_from(data),
        warning_lead_periods=_get_int(data, "envelope.warning_lead_periods",
                                      DEFAULT_WARNING_LEAD_PERIODS),
    )
