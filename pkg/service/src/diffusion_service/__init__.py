"""Guidance service: the wire-protocol server for scene-editing engines."""

from .app import create_app
from .backends import ENCODER_DIMS, MockBackend, WeightsBackend
from .registry import AdapterRegistry

__all__ = [
    "AdapterRegistry",
    "ENCODER_DIMS",
    "MockBackend",
    "WeightsBackend",
    "create_app",
]
