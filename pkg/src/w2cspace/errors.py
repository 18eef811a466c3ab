"""Shared exception types for the pipeline."""


class DegenerateInputError(ValueError):
    """A numeric input violates a precondition (zero norm, empty set, ...)."""


class ArtifactFormatError(ValueError):
    """An on-disk artifact is malformed: bad magic, version, or truncation."""


class ConfigMismatchError(ValueError):
    """Two artifacts or an artifact and the run config disagree on a shape
    parameter (n, k, h, vocabulary size)."""


class DatasetFormatError(ValueError):
    """A dataset line violates the declared file format."""


class TrainingDivergedError(RuntimeError):
    """A training loop produced a non-finite loss."""
