"""Exception hierarchy. CLI exit codes map onto the three branches:
validation errors -> 1, numerics errors -> 2, I/O errors -> 3."""


class BubbleONetError(Exception):
    """Base class for all package errors."""


class ValidationError(BubbleONetError, ValueError):
    """Bad user input: domain violations, shape mismatches, config problems."""


class DomainError(ValidationError):
    """Argument outside the mathematical domain of an operation."""


class ShapeError(ValidationError):
    """Array shape or width mismatch."""


class ConfigError(ValidationError):
    """Malformed or inconsistent run configuration."""


class ResampleHintError(ValidationError):
    """Provided signal length does not match the branch input width."""


class NumericsError(BubbleONetError, RuntimeError):
    """Runtime numerical failure."""


class SingularityError(NumericsError):
    """Bubble radius reached zero or below during RHS evaluation.

    ``t_index`` carries the failing node when raised from a grid integration.
    """

    def __init__(self, msg, t_index=None):
        super().__init__(msg)
        self.t_index = t_index


class DegenerateStateError(NumericsError):
    """Vanishing denominator in the compressible-model acceleration."""


class StiffnessError(NumericsError):
    """Adaptive step size underflowed; the problem is too stiff for this solver."""


class TrainingDivergedError(NumericsError):
    """Non-finite loss during training; carries a diagnostic snapshot."""

    def __init__(self, msg, snapshot=None):
        super().__init__(msg)
        self.snapshot = snapshot or {}


class BasisDegeneracyError(NumericsError):
    """Rank-deficient trunk basis; reduce latent_dim."""


class GraphError(BubbleONetError, RuntimeError):
    """Reverse-mode use of a value that is not part of a recorded computation."""


class DatasetIOError(BubbleONetError, IOError):
    """Base class for dataset/checkpoint storage failures."""


class ChecksumError(DatasetIOError):
    """Stored payload does not match its recorded CRC32C."""


class TruncatedBlobError(DatasetIOError):
    """Binary payload is shorter than the manifest claims."""


class SchemaVersionError(DatasetIOError):
    """On-disk format_version is not supported by this build."""
