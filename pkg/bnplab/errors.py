"""
Exception hierarchy for the lab.
Library code raises these; the command router turns them into result dicts.
"""
from typing import Optional


class BnpLabError(Exception):
    """Base class for every error raised by bnplab."""


class ShapeError(BnpLabError, ValueError):
    """Operand shapes do not agree."""


class NonFiniteError(BnpLabError, ValueError):
    """Input contains NaN or infinity."""


class RankError(BnpLabError):
    """Matrix is zero or lacks the rank an operation needs."""


class ZeroVarianceError(BnpLabError):
    """A feature has zero variance and no stabilization was requested."""


class BatchSizeError(BnpLabError):
    """Batch size is not valid for the requested operation."""


class StaleCacheError(BnpLabError):
    """Backward called without a matching forward pass."""


class ConfigError(BnpLabError):
    """Invalid or unknown configuration value."""


class DataFormatError(BnpLabError):
    """Dataset file is malformed."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


BN_BATCH_SIZE_ONE = "BN undefined at batch size 1"
