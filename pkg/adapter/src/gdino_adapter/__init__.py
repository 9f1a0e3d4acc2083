"""Trainer adapter: translates ets trial configs into GroundingDINO runs."""

from .config import AdapterConfig, UnmappedKeyError, resolve_overrides

__version__ = "0.1.0"

__all__ = ["AdapterConfig", "UnmappedKeyError", "resolve_overrides"]
