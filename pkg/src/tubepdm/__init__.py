"""Predictive maintenance for tubing machines.

Ingests machine sensor telemetry, trains forecasting models on historical
windows, and predicts downtime early enough to schedule maintenance.
"""

__version__ = "0.1.0"

from .params import ParameterSchema  # noqa: F401
from .store import SensorReading, SeriesFrame, TelemetryStore  # noqa: F401
