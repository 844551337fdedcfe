"""Desk-scale distributed-training laboratory.

Selective-synchronization training alongside fully synchronous, federated
averaging, and bounded-staleness baselines, over a parameter-server cluster
that runs on a deterministic single-thread scheduler or real TCP sockets.
"""

from .errors import ConfigError, ProtocolError, SignalError, TransportError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ProtocolError",
    "SignalError",
    "TransportError",
    "__version__",
]
