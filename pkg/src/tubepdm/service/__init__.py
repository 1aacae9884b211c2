"""HTTP service: the ingestion/query/forecast API the dashboard polls."""

from .app import create_app  # noqa: F401
