"""End-to-end glue: store -> grid frames -> cleaned matrix -> windows -> models.

This is the shared machinery behind the CLI stages and the serving path, so
both always see identical datasets for identical inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bundle import ModelBundle
from .downtime import DowntimeForecast, OperatingEnvelope, forecast_downtime
from .errors import InvalidDatasetError
from .forest import Forest, ForestConfig, fit_forest, predict_batch
from .lstm import TrainConfig, TrainReport, train
from .params import ParameterSchema
from .preprocess import (
    CleaningConfig,
    NormalizationStats,
    WindowedDataset,
    chrono_split,
    clean_series,
    fit_normalizer,
    make_windows,
    normalize,
)
from .store import TelemetryStore, resample


@dataclass(frozen=True)
class PipelineConfig:
    period_ms: int = 1000
    window_len: int = 32
    horizon: int = 1
    stride: int = 1
    train_fraction: float = 0.8
    normalization: str = "minmax"
    cleaning: CleaningConfig = field(default_factory=CleaningConfig)


def grid_matrix(store: TelemetryStore, machine_id: str, period_ms: int,
                cleaning: CleaningConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Resample every parameter onto a shared grid and clean each column.

    Returns ([L, F] matrix with NaN gaps, [L] grid timestamps). Rows cover the
    union of occupied buckets across parameters.
    """
    schema = store.schema
    per_param = {}
    t_min, t_max = None, None
    for parameter in schema.parameters():
        readings = store.query_all(machine_id, parameter)
        points = resample(readings, period_ms, agg="mean")
        if points:
            per_param[parameter] = {p.timestamp_ms: p.value for p in points}
            lo, hi = points[0].timestamp_ms, points[-1].timestamp_ms
            t_min = lo if t_min is None else min(t_min, lo)
            t_max = hi if t_max is None else max(t_max, hi)
    if t_min is None:
        return np.empty((0, schema.size)), np.empty(0, dtype=np.int64)
    n_rows = (t_max - t_min) // period_ms + 1
    timestamps = t_min + period_ms * np.arange(n_rows, dtype=np.int64)
    matrix = np.full((n_rows, schema.size), np.nan)
    for j, parameter in enumerate(schema.parameters()):
        lookup = per_param.get(parameter)
        if not lookup:
            continue
        column = [lookup.get(int(t)) for t in timestamps]
        cleaned, _ = clean_series(column, cleaning or CleaningConfig())
        for i, v in enumerate(cleaned):
            if v is not None:
                matrix[i, j] = v
    return matrix, timestamps


def complete_rows(matrix: np.ndarray, timestamps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Drop rows that still have gaps after cleaning."""
    keep = ~np.isnan(matrix).any(axis=1)
    return matrix[keep], timestamps[keep]


@dataclass
class PreparedData:
    matrix_raw: np.ndarray  # complete rows, raw units
    timestamps: np.ndarray
    stats: NormalizationStats
    dataset: WindowedDataset  # normalized windows over the full series
    train: WindowedDataset
    validation: WindowedDataset


def prepare_dataset(store: TelemetryStore, machine_id: str, cfg: PipelineConfig,
                    maintenance_boundaries=()) -> PreparedData:
    matrix, timestamps = grid_matrix(store, machine_id, cfg.period_ms, cfg.cleaning)
    matrix, timestamps = complete_rows(matrix, timestamps)
    if matrix.shape[0] < cfg.window_len + cfg.horizon:
        raise InvalidDatasetError(
            f"{matrix.shape[0]} usable frames; need at least {cfg.window_len + cfg.horizon}")
    stats = fit_normalizer(matrix, cfg.normalization)
    normalized = normalize(matrix, stats)
    dataset = make_windows(normalized, timestamps, cfg.window_len, cfg.horizon,
                           cfg.stride, maintenance_boundaries)
    train_split, validation_split = chrono_split(dataset, cfg.train_fraction)
    return PreparedData(matrix_raw=matrix, timestamps=timestamps, stats=stats,
                        dataset=dataset, train=train_split, validation=validation_split)


def train_lstm(data: PreparedData, cfg: TrainConfig) -> TrainReport:
    return train(data.train, data.validation, cfg)


def train_forests(data: PreparedData, cfg: ForestConfig) -> list[Forest]:
    """One single-output forest per parameter, on flattened windows.

    Output k gets its own seed block so per-tree streams never collide."""
    flat = data.train.flattened_inputs()
    forests = []
    for k in range(data.train.n_features):
        per_output = ForestConfig(
            n_trees=cfg.n_trees, max_depth=cfg.max_depth,
            min_samples_leaf=cfg.min_samples_leaf,
            features_per_split=cfg.features_per_split, bootstrap=cfg.bootstrap,
            rng_seed=cfg.rng_seed + 100_003 * k, task=cfg.task)
        forests.append(fit_forest(flat, data.train.targets[:, k], per_output))
    return forests


def lstm_validation_mse(data: PreparedData, bundle_params) -> float:
    from .lstm import batch_loss

    split = data.validation if data.validation.n_samples else data.train
    return batch_loss(split.inputs, split.targets, bundle_params)


def forest_validation_mse(data: PreparedData, forests: list) -> float:
    split = data.validation if data.validation.n_samples else data.train
    flat = split.flattened_inputs()
    preds = np.stack([predict_batch(f, flat) for f in forests], axis=1)
    diff = preds - split.targets
    return float(np.mean(diff * diff))


def persistence_mse(split: WindowedDataset) -> float:
    """Baseline: forecast the last observed row. The floor any model must beat."""
    if split.n_samples == 0:
        raise InvalidDatasetError("empty split")
    diff = split.inputs[:, -1, :] - split.targets
    return float(np.mean(diff * diff))


def forecast_for_machine(
    store: TelemetryStore,
    machine_id: str,
    bundle: ModelBundle,
    envelope: OperatingEnvelope,
    horizon_steps: int,
    cleaning: CleaningConfig | None = None,
) -> tuple[DowntimeForecast, np.ndarray, np.ndarray]:
    """Assemble the latest window from the store and run the predictor.

    Returns (forecast, [K, F] raw forecast matrix, [K] forecast timestamps).
    """
    matrix, timestamps = grid_matrix(store, machine_id, bundle.period_ms, cleaning)
    matrix, timestamps = complete_rows(matrix, timestamps)
    if matrix.shape[0] < bundle.window_len:
        raise InvalidDatasetError(
            f"{matrix.shape[0]} usable frames; need {bundle.window_len} for a forecast window")
    window = matrix[-bundle.window_len:]
    window_ts = timestamps[-bundle.window_len:]
    schema = ParameterSchema(zones=bundle.zones)
    forecast, steps_raw = forecast_downtime(
        window, window_ts, machine_id, bundle.lstm, bundle.stats, envelope,
        horizon_steps, bundle.period_ms, schema, forests=bundle.forests)
    step_ts = window_ts[-1] + bundle.period_ms * np.arange(1, horizon_steps + 1, dtype=np.int64)
    return forecast, steps_raw, step_ts
