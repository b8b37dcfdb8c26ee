"""Exception types shared across the engine."""

from __future__ import annotations


class TracePropError(Exception):
    """Base class for all engine errors."""


class DimensionError(TracePropError, ValueError):
    """Array shapes do not agree."""


class NumericError(TracePropError, FloatingPointError):
    """A non-finite value (NaN/Inf) was produced or supplied."""


class ContrastiveBatchError(TracePropError, ValueError):
    """The pairwise contrastive loss needs at least two samples per batch."""


class ConfigError(TracePropError, ValueError):
    """Invalid configuration or architecture description."""


class ContainerFormatError(TracePropError, ValueError):
    """Malformed binary container (data or checkpoint).

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
