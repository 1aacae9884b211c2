"""Deterministic synthetic tubing-machine telemetry generator.

Stands in for a real machine: each parameter is a baseline plus optional
periodic modulation, degradation drift (linear or exponential), and seeded
Gaussian noise. Because the noise-free trajectory is known in closed form,
the generator doubles as the ground-truth oracle for downtime prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .downtime import OperatingEnvelope
from .errors import InvalidArgumentError
from .params import (
    ACTUAL_VALUES_INPUT,
    EJECTION_PCT,
    EXTRUDER_PRESSURE,
    MACHINE_SPEED,
    ParameterSchema,
    heating_zone,
)
from .rng import Pcg32
from .store import SensorReading

DEFAULT_BASELINES = {
    EJECTION_PCT: 2.0,
    EXTRUDER_PRESSURE: 150.0,
    MACHINE_SPEED: 100.0,
    ACTUAL_VALUES_INPUT: 50.0,
}
DEFAULT_ZONE_BASELINE = 200.0


@dataclass(frozen=True)
class DriftProfile:
    """Degradation of one parameter starting at start_ms.

    linear:       rate * (t - start)
    exponential:  rate * (exp((t - start) / tau_ms) - 1)
    """

    parameter: str
    mode: str  # "linear" or "exponential"
    rate: float
    start_ms: int = 0
    tau_ms: float = 60_000.0

    def __post_init__(self):
        if self.mode not in ("linear", "exponential"):
            raise InvalidArgumentError(f"unknown drift mode {self.mode!r}")
        if not math.isfinite(self.rate):
            raise InvalidArgumentError("drift rate must be finite")
        if self.mode == "exponential" and self.tau_ms <= 0:
            raise InvalidArgumentError("exponential drift needs tau_ms > 0")


@dataclass(frozen=True)
class Modulation:
    """Periodic (sine) component of one parameter's nominal behavior."""

    parameter: str
    amplitude: float
    period_ms: float
    phase_rad: float = 0.0

    def __post_init__(self):
        if self.period_ms <= 0:
            raise InvalidArgumentError("modulation period must be positive")


@dataclass(frozen=True)
class InjectedFailure:
    """Hard fault: the parameter's sensor goes silent from `time_ms` on and
    the machine counts as down at that instant."""

    parameter: str
    time_ms: int


@dataclass
class SimConfig:
    machine_id: str = "tube-01"
    rng_seed: int = 0
    sample_period_ms: int = 1000
    zones: int = 4
    baselines: dict = field(default_factory=dict)  # parameter -> value
    noise_sigma: dict = field(default_factory=dict)  # parameter -> sigma
    modulations: list = field(default_factory=list)
    drifts: list = field(default_factory=list)
    injected_failure: InjectedFailure | None = None
    maintenance_resets: list = field(default_factory=list)  # timestamps ms

    def __post_init__(self):
        if self.sample_period_ms <= 0:
            raise InvalidArgumentError("sample_period_ms must be positive")
        for sigma in self.noise_sigma.values():
            if sigma < 0:
                raise InvalidArgumentError("noise sigma must be >= 0")

    @property
    def schema(self) -> ParameterSchema:
        return ParameterSchema(zones=self.zones)

    def baseline(self, parameter: str) -> float:
        if parameter in self.baselines:
            return self.baselines[parameter]
        if parameter in DEFAULT_BASELINES:
            return DEFAULT_BASELINES[parameter]
        return DEFAULT_ZONE_BASELINE

    def sigma(self, parameter: str) -> float:
        return self.noise_sigma.get(parameter, 0.0)


@dataclass
class SimRun:
    readings: list  # list[SensorReading], grid aligned, time-major
    ground_truth_down_at: int | None = None


def _drift_value(profile: DriftProfile, t: int, resets) -> float:
    start = profile.start_ms
    for r in resets:
        if r <= t and r > start:
            start = r
    dt = t - start
    if dt <= 0:
        return 0.0
    if profile.mode == "linear":
        return profile.rate * dt
    return profile.rate * (math.exp(dt / profile.tau_ms) - 1.0)


def noise_free_value(cfg: SimConfig, parameter: str, t: int) -> float:
    """Baseline + modulation + accumulated drift at grid time t, no noise."""
    v = cfg.baseline(parameter)
    for mod in cfg.modulations:
        if mod.parameter == parameter:
            v += mod.amplitude * math.sin(2.0 * math.pi * t / mod.period_ms + mod.phase_rad)
    resets = sorted(cfg.maintenance_resets)
    for drift in cfg.drifts:
        if drift.parameter == parameter:
            v += _drift_value(drift, t, resets)
    return v


def generate(cfg: SimConfig, duration_ms: int,
             envelope: OperatingEnvelope | None = None) -> SimRun:
    """Produce the reading stream for grid times 0 <= t < duration.

    Readings are emitted time-major in canonical parameter order; noise draws
    follow that order, so the stream is bit-identical for a fixed seed. When
    an envelope is given, the run carries the noise-free ground-truth downtime.
    """
    if duration_ms < 0:
        raise InvalidArgumentError("duration must be >= 0")
    rng = Pcg32(cfg.rng_seed)
    parameters = cfg.schema.parameters()
    failure = cfg.injected_failure
    readings = []
    t = 0
    while t < duration_ms:
        for parameter in parameters:
            if failure and failure.parameter == parameter and t >= failure.time_ms:
                continue  # sensor silent after the hard fault
            value = noise_free_value(cfg, parameter, t)
            sigma = cfg.sigma(parameter)
            if sigma > 0:
                value += rng.gauss(0.0, sigma)
            readings.append(SensorReading(cfg.machine_id, t, parameter, value))
        t += cfg.sample_period_ms
    truth = None
    if envelope is not None:
        truth = ground_truth_down_at(cfg, envelope, duration_ms)
    if failure is not None and failure.time_ms < duration_ms:
        truth = failure.time_ms if truth is None else min(truth, failure.time_ms)
    return SimRun(readings=readings, ground_truth_down_at=truth)


def _scan_down_at(cfg: SimConfig, envelope: OperatingEnvelope, duration_ms: int) -> int | None:
    """Grid scan for the first >= D-step run of the noise-free trajectory
    strictly outside the envelope; returns the run's onset time."""
    d_required = envelope.sustain_steps
    period = cfg.sample_period_ms
    run_start: dict[str, int | None] = {}
    run_len: dict[str, int] = {}
    t = 0
    while t < duration_ms:
        for parameter, (lower, upper) in envelope.bounds.items():
            v = noise_free_value(cfg, parameter, t)
            if v < lower or v > upper:
                if run_len.get(parameter, 0) == 0:
                    run_start[parameter] = t
                run_len[parameter] = run_len.get(parameter, 0) + 1
                if run_len[parameter] >= d_required:
                    return run_start[parameter]
            else:
                run_len[parameter] = 0
        t += period
    return None


def _linear_crossing(cfg: SimConfig, drift: DriftProfile,
                     lower: float, upper: float) -> int | None:
    """First grid time strictly past a pure-linear crossing, closed form."""
    base = cfg.baseline(drift.parameter)
    if drift.rate > 0:
        t_cross = drift.start_ms + (upper - base) / drift.rate
    elif drift.rate < 0:
        t_cross = drift.start_ms + (lower - base) / drift.rate
    else:
        return None
    period = cfg.sample_period_ms
    k = math.floor(t_cross / period) + 1  # strictly past the crossing
    return max(k, 0) * period


def ground_truth_down_at(cfg: SimConfig, envelope: OperatingEnvelope,
                         duration_ms: int) -> int | None:
    """Ground-truth downtime onset of the noise-free trajectory within the run.

    Pure linear-drift configs (no modulation, resets, or injected failure) use
    the closed-form crossing; anything else falls back to the grid scan. The D
    consecutive out-of-bounds steps must fit inside the duration.
    """
    analytic_ok = (
        not cfg.modulations
        and not cfg.maintenance_resets
        and cfg.injected_failure is None
        and all(d.mode == "linear" for d in cfg.drifts)
    )
    if not analytic_ok:
        return _scan_down_at(cfg, envelope, duration_ms)

    best: int | None = None
    for parameter, (lower, upper) in envelope.bounds.items():
        base = cfg.baseline(parameter)
        if base < lower or base > upper:
            candidate = 0  # out of bounds from the first sample
        else:
            drifts = [d for d in cfg.drifts if d.parameter == parameter]
            if len(drifts) != 1:
                if drifts:  # stacked drifts: no single closed form
                    return _scan_down_at(cfg, envelope, duration_ms)
                continue
            candidate = _linear_crossing(cfg, drifts[0], lower, upper)
            if candidate is None:
                continue
        # the full D-step run must fit before the stream ends
        last_needed = candidate + (envelope.sustain_steps - 1) * cfg.sample_period_ms
        if last_needed < duration_ms and (best is None or candidate < best):
            best = candidate
    return best
