"""MQTT bridge-architecture benchmark: broker, client, bridge, load and reports."""

from .errors import BridgeBenchError

__version__ = "0.1.0"

__all__ = ["BridgeBenchError", "__version__"]
