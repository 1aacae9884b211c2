"""Telemetry data model and embedded append-only persistence.

The store keeps one value per (machine, parameter, timestamp) key with
last-write-wins semantics, serves half-open range queries sorted by time,
and persists to a single line-based log file:

    pdm-log v1 zones=<Z>
    <timestamp_ms>,<machine_id>,<parameter>,<value>

Values are written in the shortest decimal form that round-trips the exact
binary64 value, so a save/load cycle is bit-exact.
"""

from __future__ import annotations

import bisect
import enum
import math
import os
import threading
from dataclasses import dataclass

from .errors import (
    InvalidArgumentError,
    InvalidRangeError,
    LogFormatError,
    LogParseError,
    NotFoundError,
    RejectedReadingError,
    StorageError,
)
from .params import MACHINE_ID_RE, ParameterSchema

LOG_MAGIC = "pdm-log"
LOG_VERSION = "v1"


@dataclass(frozen=True)
class SensorReading:
    """One timestamped value of one machine parameter."""

    machine_id: str
    timestamp_ms: int
    parameter: str
    value: float


@dataclass(frozen=True)
class SeriesFrame:
    """One multivariate sample: a value slot per parameter in canonical order.

    Absent slots are None, never zero.
    """

    timestamp_ms: int
    values: tuple  # tuple[float | None, ...], length = schema.size


@dataclass(frozen=True)
class SeriesPoint:
    """One resampled grid point; value is None for an empty bucket."""

    timestamp_ms: int
    value: float | None


class MachineStatus(enum.Enum):
    RUNNING = "running"
    DOWN = "down"
    MAINTENANCE = "maintenance"


class TelemetryStore:
    """In-memory indexed store with a serialized writer and snapshot reads.

    All mutation and read paths take the same lock, so a query never observes
    a half-applied append. The handle is safe to share across threads.
    """

    def __init__(self, schema: ParameterSchema | None = None):
        self.schema = schema or ParameterSchema()
        self._values: dict[tuple[str, str], dict[int, float]] = {}
        self._times: dict[tuple[str, str], list[int]] = {}
        self._machines: set[str] = set()
        self._lock = threading.RLock()

    @property
    def size(self) -> int:
        """Count of distinct (machine, parameter, timestamp) keys."""
        with self._lock:
            return sum(len(v) for v in self._values.values())

    def validate_reading(self, reading: SensorReading) -> None:
        """Raise RejectedReadingError unless the reading is storable."""
        if not isinstance(reading.value, (int, float)) or not math.isfinite(reading.value):
            raise RejectedReadingError(f"non-finite value {reading.value!r}")
        if reading.timestamp_ms < 0:
            raise RejectedReadingError(f"negative timestamp {reading.timestamp_ms}")
        if not MACHINE_ID_RE.match(reading.machine_id or ""):
            raise RejectedReadingError(f"invalid machine id {reading.machine_id!r}")
        if not self.schema.is_valid(reading.parameter):
            raise RejectedReadingError(f"unknown parameter {reading.parameter!r}")

    def append(self, reading: SensorReading) -> int:
        """Store a reading (last-write-wins on duplicate key); returns store size."""
        self.validate_reading(reading)
        key = (reading.machine_id, reading.parameter)
        with self._lock:
            series = self._values.setdefault(key, {})
            if reading.timestamp_ms not in series:
                bisect.insort(self._times.setdefault(key, []), reading.timestamp_ms)
            series[reading.timestamp_ms] = float(reading.value)
            self._machines.add(reading.machine_id)
            return sum(len(v) for v in self._values.values())

    def machines(self) -> list[str]:
        with self._lock:
            return sorted(self._machines)

    def has_machine(self, machine_id: str) -> bool:
        with self._lock:
            return machine_id in self._machines

    def query_range(self, machine_id: str, parameter: str, t0: int, t1: int) -> list[SensorReading]:
        """All readings with t0 <= timestamp < t1, ascending by timestamp."""
        if t0 > t1:
            raise InvalidRangeError(f"t0 {t0} > t1 {t1}")
        if not self.schema.is_valid(parameter):
            raise InvalidArgumentError(f"unknown parameter {parameter!r}")
        key = (machine_id, parameter)
        with self._lock:
            times = self._times.get(key)
            if not times:
                return []
            lo = bisect.bisect_left(times, t0)
            hi = bisect.bisect_left(times, t1)
            series = self._values[key]
            return [
                SensorReading(machine_id, t, parameter, series[t]) for t in times[lo:hi]
            ]

    def query_all(self, machine_id: str, parameter: str) -> list[SensorReading]:
        """Full history for one parameter, ascending by timestamp."""
        key = (machine_id, parameter)
        with self._lock:
            times = self._times.get(key, [])
            series = self._values.get(key, {})
            return [SensorReading(machine_id, t, parameter, series[t]) for t in times]

    def latest_frame(self, machine_id: str) -> SeriesFrame:
        """Per-parameter most recent value; frame time = max contributing timestamp."""
        with self._lock:
            if machine_id not in self._machines:
                raise NotFoundError(f"unknown machine {machine_id!r}")
            slots: list[float | None] = []
            frame_ts = 0
            for parameter in self.schema.parameters():
                times = self._times.get((machine_id, parameter))
                if times:
                    t = times[-1]
                    slots.append(self._values[(machine_id, parameter)][t])
                    frame_ts = max(frame_ts, t)
                else:
                    slots.append(None)
            return SeriesFrame(timestamp_ms=frame_ts, values=tuple(slots))

    # ── persistence ────────────────────────────────────────────────────────

    def save_log(self, path: str) -> int:
        """Write the whole store in canonical order; returns record count."""
        with self._lock:
            try:
                with open(path, "w", encoding="utf-8", newline="") as fh:
                    fh.write(f"{LOG_MAGIC} {LOG_VERSION} zones={self.schema.zones}\n")
                    count = 0
                    for machine_id in sorted(self._machines):
                        for parameter in self.schema.parameters():
                            key = (machine_id, parameter)
                            series = self._values.get(key)
                            if not series:
                                continue
                            for t in self._times[key]:
                                fh.write(format_log_line(
                                    SensorReading(machine_id, t, parameter, series[t])))
                                count += 1
                    return count
            except OSError as exc:
                raise StorageError(f"cannot write log {path!r}: {exc}") from exc

    def append_to_log(self, path: str, readings: list[SensorReading]) -> None:
        """Incrementally append readings to an existing log file (creates with header)."""
        with self._lock:
            try:
                fresh = not os.path.exists(path) or os.path.getsize(path) == 0
                with open(path, "a", encoding="utf-8", newline="") as fh:
                    if fresh:
                        fh.write(f"{LOG_MAGIC} {LOG_VERSION} zones={self.schema.zones}\n")
                    for r in readings:
                        fh.write(format_log_line(r))
            except OSError as exc:
                raise StorageError(f"cannot append to log {path!r}: {exc}") from exc


def format_log_line(reading: SensorReading) -> str:
    return (
        f"{reading.timestamp_ms},{reading.machine_id},"
        f"{reading.parameter},{reading.value!r}\n"
    )


def parse_log_header(line: str) -> int:
    """Validate the header line and return the zone count."""
    parts = line.strip().split()
    if not parts or parts[0] != LOG_MAGIC:
        raise LogFormatError(f"not a {LOG_MAGIC} file (header {line.strip()!r})")
    if len(parts) < 2 or parts[1] != LOG_VERSION:
        raise LogFormatError(f"unsupported log version {line.strip()!r}")
    zones = None
    for token in parts[2:]:
        if token.startswith("zones="):
            try:
                zones = int(token.removeprefix("zones="))
            except ValueError:
                raise LogFormatError(f"bad zones field in header {line.strip()!r}") from None
    if zones is None or zones < 1:
        raise LogFormatError(f"missing or invalid zones field in header {line.strip()!r}")
    return zones


def load_log(path: str, store: TelemetryStore | None = None) -> TelemetryStore:
    """Read a pdm-log file into a store (a new one unless given).

    Malformed lines raise LogParseError carrying the 1-based line number.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise StorageError(f"cannot read log {path!r}: {exc}") from exc
    if not lines:
        raise LogFormatError(f"empty log file {path!r}")
    zones = parse_log_header(lines[0])
    if store is None:
        store = TelemetryStore(ParameterSchema(zones=zones))
    elif store.schema.zones != zones:
        raise LogFormatError(
            f"log zones={zones} does not match store zones={store.schema.zones}")
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 4:
            raise LogParseError(line_no, f"expected 4 fields, got {len(fields)}")
        ts_text, machine_id, parameter, value_text = fields
        try:
            timestamp_ms = int(ts_text)
        except ValueError:
            raise LogParseError(line_no, f"bad timestamp {ts_text!r}") from None
        try:
            value = float(value_text)
        except ValueError:
            raise LogParseError(line_no, f"bad value {value_text!r}") from None
        reading = SensorReading(machine_id, timestamp_ms, parameter, value)
        try:
            store.append(reading)
        except RejectedReadingError as exc:
            raise LogParseError(line_no, str(exc)) from None
    return store


def resample(readings: list[SensorReading], period_ms: int, agg: str = "mean") -> list[SeriesPoint]:
    """Aggregate time-ordered readings onto a fixed grid.

    Bucket b covers [b*period, (b+1)*period) and is emitted at its start time.
    Buckets between the first and last occupied one are emitted as gaps
    (value None), never zero-filled.
    """
    if period_ms <= 0:
        raise InvalidArgumentError(f"period must be positive, got {period_ms}")
    if agg not in ("mean", "last", "max"):
        raise InvalidArgumentError(f"unknown aggregation {agg!r}")
    if not readings:
        return []
    buckets: dict[int, list[float]] = {}
    for r in readings:
        buckets.setdefault(r.timestamp_ms // period_ms, []).append(r.value)
    first = min(buckets)
    last = max(buckets)
    points = []
    for b in range(first, last + 1):
        vals = buckets.get(b)
        if vals is None:
            value = None
        elif agg == "mean":
            value = sum(vals) / len(vals)
        elif agg == "last":
            value = vals[-1]
        else:
            value = max(vals)
        points.append(SeriesPoint(timestamp_ms=b * period_ms, value=value))
    return points
