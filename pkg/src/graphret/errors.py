"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so new error conditions
should subclass one of the four categories below rather than raising
bare ValueError.
"""


class GraphretError(Exception):
    """Base class for all package errors."""


class ConfigError(GraphretError):
    """Bad configuration: unknown key, wrong type, out-of-range value."""


class ValidationError(GraphretError):
    """Malformed or inconsistent input data (files, graphs, corpora)."""

    def __init__(self, message, path=None, line=None):
        if path is not None and line is not None:
            message = f"{path}:{line}: {message}"
        elif path is not None:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path
        self.line = line


class ShapeError(GraphretError):
    """Dimension mismatch between tensors or vectors."""


class NumericError(GraphretError):
    """A numeric operation produced NaN/Inf or violated a math precondition."""


class DeterminismError(NumericError):
    """A function that must be deterministic returned two different values."""


class MissingArtifactError(GraphretError):
    """A required file (checkpoint, dataset, index) does not exist."""


class GenerationError(GraphretError):
    """Synthetic dataset generation could not satisfy the requested spec."""
