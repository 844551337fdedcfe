"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, dataset, or argument combination."""


class SignalError(ValueError):
    """Invalid input to the gradient-change detector (NaN, bad smoothing factor)."""


class ProtocolError(RuntimeError):
    """A node received a message that violates the cluster protocol."""


class TransportError(RuntimeError):
    """Transport failure: timeout, framing error, or peer gone."""
