"""Series cleaning, normalization, window construction, and correlation analysis.

Everything here is a pure function over immutable inputs. Frame matrices are
float64 arrays of shape [L, F] in canonical parameter order, with NaN marking
an absent slot (values inside the store are always finite, so NaN is free to
use as the gap marker).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, MissingStatsError
from .params import ParameterSchema
from .store import SeriesFrame


@dataclass(frozen=True)
class CleaningConfig:
    outlier_z: float = 4.0
    max_gap: int = 5

    def __post_init__(self):
        if self.outlier_z <= 0:
            raise InvalidArgumentError(f"outlier_z must be positive, got {self.outlier_z}")
        if self.max_gap < 0:
            raise InvalidArgumentError(f"max_gap must be >= 0, got {self.max_gap}")


@dataclass
class CleaningReport:
    interpolated: int = 0
    clamped: int = 0
    gaps_left: list = field(default_factory=list)  # (start_index, length) per surviving gap


@dataclass(frozen=True)
class NormalizationStats:
    """Per-parameter scaling statistics; `mode` is "minmax" or "zscore"."""

    mode: str
    mins: np.ndarray | None = None
    maxs: np.ndarray | None = None
    means: np.ndarray | None = None
    stds: np.ndarray | None = None

    @property
    def size(self) -> int:
        arr = self.mins if self.mode == "minmax" else self.means
        return len(arr)


@dataclass
class WindowedDataset:
    """Sliding-window supervision tensors: inputs [N, W, F], targets [N, F]."""

    inputs: np.ndarray
    targets: np.ndarray
    timestamps: np.ndarray  # target-row timestamp per sample
    window_len: int
    horizon: int
    stride: int

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[2]

    def flattened_inputs(self) -> np.ndarray:
        """[N, W*F] view for flat-vector models."""
        return self.inputs.reshape(self.n_samples, -1)


@dataclass(frozen=True)
class CorrelationMatrix:
    labels: tuple
    matrix: np.ndarray  # [F, F], symmetric, unit diagonal
    insufficient: frozenset = frozenset()  # (i, j) pairs with < 2 usable rows

    def to_csv(self) -> str:
        lines = [",".join(self.labels)]
        for row in self.matrix:
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def frames_to_matrix(frames: list[SeriesFrame], schema: ParameterSchema) -> tuple[np.ndarray, np.ndarray]:
    """Stack frames into ([L, F] matrix with NaN gaps, [L] int64 timestamps)."""
    n = len(frames)
    matrix = np.full((n, schema.size), np.nan)
    ts = np.empty(n, dtype=np.int64)
    for i, frame in enumerate(frames):
        ts[i] = frame.timestamp_ms
        for j, v in enumerate(frame.values):
            if v is not None:
                matrix[i, j] = v
    return matrix, ts


def clean_series(values, cfg: CleaningConfig | None = None):
    """Clamp outliers and interpolate short gaps in one grid-aligned series.

    `values` is a sequence of float-or-None. Outliers (|z| > outlier_z against
    the mean/std of the present values) are clamped to mean +/- outlier_z*std.
    Gaps of at most max_gap points between two present neighbors are filled
    linearly; longer gaps and edge gaps are left absent and reported.

    Returns (cleaned list, CleaningReport).
    """
    cfg = cfg or CleaningConfig()
    report = CleaningReport()
    out: list[float | None] = [None if v is None else float(v) for v in values]
    present = [v for v in out if v is not None]
    if not present:
        if out:
            report.gaps_left.append((0, len(out)))
        return out, report

    mean = sum(present) / len(present)
    var = sum((v - mean) ** 2 for v in present) / len(present)
    std = math.sqrt(var)
    if std > 0:
        lo = mean - cfg.outlier_z * std
        hi = mean + cfg.outlier_z * std
        for i, v in enumerate(out):
            if v is None:
                continue
            if v > hi:
                out[i] = hi
                report.clamped += 1
            elif v < lo:
                out[i] = lo
                report.clamped += 1

    # Gap fill after clamping so interpolation uses the cleaned neighbors.
    i = 0
    n = len(out)
    while i < n:
        if out[i] is not None:
            i += 1
            continue
        start = i
        while i < n and out[i] is None:
            i += 1
        length = i - start
        left = out[start - 1] if start > 0 else None
        right = out[i] if i < n else None
        if left is not None and right is not None and length <= cfg.max_gap:
            span = length + 1
            for k in range(length):
                out[start + k] = left + (right - left) * (k + 1) / span
            report.interpolated += length
        else:
            report.gaps_left.append((start, length))
    return out, report


def fit_normalizer(matrix: np.ndarray, mode: str = "minmax") -> NormalizationStats:
    """Fit per-parameter scaling stats over the present (non-NaN) values."""
    if mode not in ("minmax", "zscore"):
        raise InvalidArgumentError(f"unknown normalization mode {mode!r}")
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2:
        raise InvalidArgumentError("expected a [L, F] matrix")
    counts = np.sum(~np.isnan(matrix), axis=0)
    empty = np.nonzero(counts == 0)[0]
    if empty.size:
        raise MissingStatsError(f"no samples for parameter indices {empty.tolist()}")
    if mode == "minmax":
        return NormalizationStats(
            mode="minmax",
            mins=np.nanmin(matrix, axis=0),
            maxs=np.nanmax(matrix, axis=0),
        )
    means = np.nanmean(matrix, axis=0)
    stds = np.sqrt(np.nanmean((matrix - means) ** 2, axis=0))
    return NormalizationStats(mode="zscore", means=means, stds=stds)


def normalize(x: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Scale raw values; the parameter axis is the last axis of x."""
    x = np.asarray(x, dtype=float)
    if stats.mode == "minmax":
        span = stats.maxs - stats.mins
        safe = np.where(span == 0, 1.0, span)
        out = (x - stats.mins) / safe
        # zero-range parameter pins to the midpoint
        return np.where(span == 0, 0.5, out)
    safe = np.where(stats.stds == 0, 1.0, stats.stds)
    out = (x - stats.means) / safe
    return np.where(stats.stds == 0, 0.0, out)


def denormalize(x: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Inverse of normalize (identity round trip within 1e-12)."""
    x = np.asarray(x, dtype=float)
    if stats.mode == "minmax":
        span = stats.maxs - stats.mins
        return np.where(span == 0, stats.mins, stats.mins + x * span)
    return np.where(stats.stds == 0, stats.means, stats.means + x * stats.stds)


def make_windows(
    matrix: np.ndarray,
    timestamps: np.ndarray,
    window_len: int = 32,
    horizon: int = 1,
    stride: int = 1,
    maintenance_boundaries=(),
) -> WindowedDataset:
    """Slice a complete frame matrix into supervised windows.

    Sample i takes input rows [i*S, i*S + W) and target row i*S + W + H - 1.
    A window is dropped when a maintenance boundary b falls inside its row
    span, i.e. ts(first row) < b <= ts(target row). A source shorter than
    W + H yields an empty dataset.
    """
    if window_len < 1 or horizon < 1 or stride < 1:
        raise InvalidArgumentError(
            f"window_len, horizon, stride must be >= 1 (got {window_len}, {horizon}, {stride})")
    matrix = np.asarray(matrix, dtype=float)
    timestamps = np.asarray(timestamps, dtype=np.int64)
    n_rows, n_feat = matrix.shape
    inputs, targets, ts_out = [], [], []
    boundaries = sorted(maintenance_boundaries)
    max_start = n_rows - window_len - horizon
    i = 0
    while i <= max_start:
        first = i
        target_row = i + window_len + horizon - 1
        t_first = timestamps[first]
        t_target = timestamps[target_row]
        crosses = any(t_first < b <= t_target for b in boundaries)
        if not crosses:
            inputs.append(matrix[first:first + window_len])
            targets.append(matrix[target_row])
            ts_out.append(t_target)
        i += stride
    if inputs:
        inputs_arr = np.stack(inputs)
        targets_arr = np.stack(targets)
        ts_arr = np.array(ts_out, dtype=np.int64)
    else:
        inputs_arr = np.empty((0, window_len, n_feat))
        targets_arr = np.empty((0, n_feat))
        ts_arr = np.empty(0, dtype=np.int64)
    return WindowedDataset(
        inputs=inputs_arr, targets=targets_arr, timestamps=ts_arr,
        window_len=window_len, horizon=horizon, stride=stride,
    )


def pearson_matrix(matrix: np.ndarray, labels=None) -> CorrelationMatrix:
    """Pearson coefficients over pairwise-complete rows.

    Zero-variance columns correlate 0 with everything else; the diagonal is
    always 1. Pairs with fewer than 2 complete rows are 0 in the matrix and
    listed in `insufficient`.
    """
    matrix = np.asarray(matrix, dtype=float)
    n_feat = matrix.shape[1]
    if labels is None:
        labels = tuple(f"f{j}" for j in range(n_feat))
    out = np.eye(n_feat)
    insufficient = set()
    present = ~np.isnan(matrix)
    for a in range(n_feat):
        for b in range(a + 1, n_feat):
            both = present[:, a] & present[:, b]
            n = int(both.sum())
            if n < 2:
                insufficient.add((a, b))
                insufficient.add((b, a))
                continue
            xa = matrix[both, a]
            xb = matrix[both, b]
            da = xa - xa.mean()
            db = xb - xb.mean()
            denom = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
            r = 0.0 if denom == 0 else float(np.dot(da, db)) / denom
            out[a, b] = out[b, a] = max(-1.0, min(1.0, r))
    return CorrelationMatrix(labels=tuple(labels), matrix=out,
                             insufficient=frozenset(insufficient))


def chrono_split(dataset: WindowedDataset, train_fraction: float) -> tuple[WindowedDataset, WindowedDataset]:
    """First ceil(N * fraction) samples become the training split, in order."""
    if not 0 < train_fraction <= 1:
        raise InvalidArgumentError(f"train_fraction must be in (0, 1], got {train_fraction}")
    n = dataset.n_samples
    cut = math.ceil(n * train_fraction)

    def take(sl):
        return WindowedDataset(
            inputs=dataset.inputs[sl], targets=dataset.targets[sl],
            timestamps=dataset.timestamps[sl],
            window_len=dataset.window_len, horizon=dataset.horizon,
            stride=dataset.stride,
        )

    return take(slice(0, cut)), take(slice(cut, n))
