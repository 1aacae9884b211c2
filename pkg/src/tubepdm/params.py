"""Canonical machine parameter identifiers and their fixed ordering.

Every multivariate frame, normalization vector, and model feature axis uses
the same parameter order: the four base parameters followed by the heating
zones ascending. The zone count is a deployment config value, not a constant.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import InvalidArgumentError

EJECTION_PCT = "ejection_pct"
EXTRUDER_PRESSURE = "extruder_pressure"
MACHINE_SPEED = "machine_speed"
ACTUAL_VALUES_INPUT = "actual_values_input"

BASE_PARAMETERS = (
    EJECTION_PCT,
    EXTRUDER_PRESSURE,
    MACHINE_SPEED,
    ACTUAL_VALUES_INPUT,
)

DEFAULT_ZONES = 4

_ZONE_RE = re.compile(r"^heating_zone_([1-9][0-9]*)$")
MACHINE_ID_RE = re.compile(r"^[A-Za-z0-9_-]+$")


def heating_zone(k: int) -> str:
    """Token for heating zone k (1-based)."""
    if k < 1:
        raise InvalidArgumentError(f"heating zone index must be >= 1, got {k}")
    return f"heating_zone_{k}"


@dataclass(frozen=True)
class ParameterSchema:
    """The full parameter set of one machine class: 4 base parameters + Z zones."""

    zones: int = DEFAULT_ZONES

    def __post_init__(self):
        if self.zones < 1:
            raise InvalidArgumentError(f"zone count must be >= 1, got {self.zones}")

    @property
    def size(self) -> int:
        return len(BASE_PARAMETERS) + self.zones

    def parameters(self) -> tuple[str, ...]:
        """All parameter tokens in canonical order."""
        return BASE_PARAMETERS + tuple(heating_zone(k) for k in range(1, self.zones + 1))

    def index(self, parameter: str) -> int:
        """Position of a parameter in canonical order; raises on unknown tokens."""
        try:
            return BASE_PARAMETERS.index(parameter)
        except ValueError:
            pass
        m = _ZONE_RE.match(parameter)
        if m:
            k = int(m.group(1))
            if 1 <= k <= self.zones:
                return len(BASE_PARAMETERS) + k - 1
        raise InvalidArgumentError(f"unknown parameter {parameter!r} (zones={self.zones})")

    def is_valid(self, parameter: str) -> bool:
        try:
            self.index(parameter)
            return True
        except InvalidArgumentError:
            return False
