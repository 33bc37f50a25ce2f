"""Exception types raised across the package."""

from __future__ import annotations


class InvalidDistributionError(ValueError):
    """A clock-offset or difference distribution is empty, unnormalizable or malformed."""


class TieError(ValueError):
    """Two messages cannot be ordered because their preceding-probability is exactly 0.5."""

    def __init__(self, message: str, pair: tuple[str, str] | None = None):
        super().__init__(message)
        self.pair = pair


class CycleError(ValueError):
    """A linear order was requested from a graph that still contains a directed cycle."""


class OrderError(ValueError):
    """A proposed linear order contradicts the tournament it claims to follow."""


class ProtocolError(ValueError):
    """An online event violates the per-client ordered-channel assumption or names an unknown client."""


class WatermarkNotEstablished(RuntimeError):
    """Some client in the configured client set has not yet sent a message or heartbeat."""
