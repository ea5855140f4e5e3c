"""Exception types shared across the package."""

from __future__ import annotations


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated by the caller."""


class InvariantViolation(RuntimeError):
    """A training or model invariant was broken at runtime."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class UnknownPromptError(KeyError):
    """Prompt id outside the embedding table."""


class CheckpointError(RuntimeError):
    """Checkpoint file is missing or malformed."""


class ChecksumError(CheckpointError):
    """Stored CRC32 does not match the checkpoint payload."""


class ConfigError(ValueError):
    """Unknown key or malformed value in a study config."""
