"""Exception types shared across the package."""


class PhaserError(Exception):
    """Base class for all package errors."""


class ParseError(PhaserError):
    """Raised on malformed IR text. Carries 1-based line and column."""

    def __init__(self, message, line, column=1):
        super().__init__(f"line {line}, col {column}: {message}")
        self.line = line
        self.column = column


class ScenarioError(PhaserError):
    """Malformed or inconsistent scenario file."""


class BackendError(PhaserError):
    """Base class for cost-backend failures."""


class CommandFailed(BackendError):
    """External command exited nonzero. Carries captured stderr."""

    def __init__(self, message, stderr=""):
        super().__init__(message)
        self.stderr = stderr


class CostParseError(BackendError):
    """Cost command output did not contain a parseable cycle count."""


class BackendTimeout(BackendError):
    """External command exceeded its time limit."""


class EpisodeFinished(PhaserError):
    """step() called after the episode already reached its length."""


class ModeUnsupported(PhaserError):
    """Operation not available under the current observation mode."""


class NormalizationError(PhaserError):
    """Per-instruction normalization with a zero instruction count."""


class ShapeMismatch(PhaserError):
    """Array or network dimensions do not agree."""


class SpaceTooLarge(PhaserError):
    """Exhaustive enumeration would exceed the configured cap."""


class EmptyDataset(PhaserError):
    """Analysis dataset has no rows or a single class."""


class TrainingDiverged(PhaserError):
    """Loss or parameters became non-finite during training."""


class ConfigError(PhaserError):
    """Invalid run configuration. Message names the offending field."""


class CheckpointError(PhaserError):
    """Checkpoint file is malformed or does not match the network."""
