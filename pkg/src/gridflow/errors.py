"""Exception hierarchy shared across the engine.

ValidationError maps to CLI exit code 1 (bad inputs, shapes, configs);
NumericalError maps to exit code 2 (NaN/inf aborts, singular scales).
"""


class EngineError(Exception):
    """Base class for all engine errors."""


class ValidationError(EngineError):
    """Malformed input, configuration, or file contents."""


class CheckpointError(ValidationError):
    """Checkpoint manifest/blob inconsistency (version, names, shapes, bytes)."""


class NumericalError(EngineError):
    """Non-finite or numerically unusable value encountered."""
