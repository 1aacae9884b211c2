"""Trained-model bundle: everything `forecast` and `serve` need in one directory.

Layout:
    lstm.pdml          recurrent forecaster (binary, see lstm module)
    forest_<k>.pdmf    optional per-parameter forests (binary, see forest module)
    norm.json          normalization statistics
    meta.json          window/grid geometry and the parameter order
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ModelFormatError
from .forest import Forest, load_forest, save_forest
from .lstm import LstmParams, load_model, save_model
from .preprocess import NormalizationStats

LSTM_FILE = "lstm.pdml"
NORM_FILE = "norm.json"
META_FILE = "meta.json"


@dataclass
class ModelBundle:
    lstm: LstmParams
    stats: NormalizationStats
    window_len: int
    horizon: int
    stride: int
    period_ms: int
    zones: int
    forests: list | None = None  # list[Forest], one per parameter

    @property
    def n_features(self) -> int:
        return self.lstm.d


def _stats_to_dict(stats: NormalizationStats) -> dict:
    out = {"mode": stats.mode}
    for name in ("mins", "maxs", "means", "stds"):
        arr = getattr(stats, name)
        if arr is not None:
            out[name] = [float(v) for v in arr]
    return out


def _stats_from_dict(data: dict) -> NormalizationStats:
    def arr(name):
        return np.array(data[name], dtype=float) if name in data else None

    return NormalizationStats(mode=data["mode"], mins=arr("mins"), maxs=arr("maxs"),
                              means=arr("means"), stds=arr("stds"))


def save_bundle(bundle: ModelBundle, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    save_model(bundle.lstm, os.path.join(directory, LSTM_FILE))
    with open(os.path.join(directory, NORM_FILE), "w", encoding="utf-8") as fh:
        json.dump(_stats_to_dict(bundle.stats), fh, indent=2)
    meta = {
        "window_len": bundle.window_len,
        "horizon": bundle.horizon,
        "stride": bundle.stride,
        "period_ms": bundle.period_ms,
        "zones": bundle.zones,
        "n_forests": len(bundle.forests) if bundle.forests else 0,
    }
    with open(os.path.join(directory, META_FILE), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
    if bundle.forests:
        for k, forest in enumerate(bundle.forests):
            save_forest(forest, os.path.join(directory, f"forest_{k:02d}.pdmf"))


def load_bundle(directory: str) -> ModelBundle:
    lstm_path = os.path.join(directory, LSTM_FILE)
    meta_path = os.path.join(directory, META_FILE)
    norm_path = os.path.join(directory, NORM_FILE)
    for path in (lstm_path, meta_path, norm_path):
        if not os.path.exists(path):
            raise ModelFormatError(f"model bundle {directory!r} is missing {os.path.basename(path)}")
    lstm = load_model(lstm_path)
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    with open(norm_path, "r", encoding="utf-8") as fh:
        stats = _stats_from_dict(json.load(fh))
    forests: list[Forest] | None = None
    n_forests = int(meta.get("n_forests", 0))
    if n_forests:
        forests = [load_forest(os.path.join(directory, f"forest_{k:02d}.pdmf"))
                   for k in range(n_forests)]
    return ModelBundle(
        lstm=lstm, stats=stats,
        window_len=int(meta["window_len"]), horizon=int(meta["horizon"]),
        stride=int(meta["stride"]), period_ms=int(meta["period_ms"]),
        zones=int(meta["zones"]), forests=forests,
    )
