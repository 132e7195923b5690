"""Execution worker for generated tool code: JSON-over-stdio protocol,
per-invoke child processes, hard timeouts, and a network-import denylist."""

__version__ = "0.1.0"

PROTOCOL_VERSION = 1
