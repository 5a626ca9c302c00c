"""Shared exception types.

Every module raises from this small hierarchy so callers (and the CLI exit
code mapping) can distinguish bad arguments, illegal state transitions, and
corrupted data without string matching.
"""


class DrrError(Exception):
    """Base class for all library errors."""


class InvalidInputError(DrrError, ValueError):
    """An argument violates a documented precondition."""


class StateError(DrrError, RuntimeError):
    """The operation is not legal in the object's current state."""


class ExhaustedStreamError(DrrError):
    """A pop was attempted with no bytes left to renormalize from."""


class InsufficientInitialBitsError(DrrError):
    """Bits-back encoding ran out of auxiliary bits to sample latents from."""


class DataCorruptionError(DrrError):
    """Serialized bytes or a stored buffer failed a consistency check."""


class DegenerateInputError(DrrError, ValueError):
    """A numeric input has no well-defined result (e.g. a zero-norm vector)."""
