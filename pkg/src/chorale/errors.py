"""Exception taxonomy and process exit codes."""


class ChoraleError(Exception):
    """Base class for all chorale errors."""


class ConfigurationError(ChoraleError):
    """Invalid or inconsistent configuration."""


class ValidationError(ChoraleError):
    """Inputs violate a documented precondition or invariant."""


class DegenerateSignalError(ValidationError):
    """Signal is all-zero or otherwise has no usable content."""


class InsufficientAudioError(ValidationError):
    """Audio slice is shorter than the configured minimum."""


class NoVerseError(ValidationError):
    """Clustering was asked to run with no verse embeddings."""


class AlignmentError(ValidationError):
    """Frame counts of tracks that must be aligned do not match."""


class CoverageError(ValidationError):
    """A frame falls outside every segment of the timeline."""


class MissingArtifactError(ChoraleError):
    """A required upstream artifact (checkpoint, corpus) does not exist."""


class TrainingFailureError(ChoraleError):
    """Training diverged. Carries the last finite-loss state if available."""

    def __init__(self, message: str, last_state=None, step: int | None = None):
        super().__init__(message)
        self.last_state = last_state
        self.step = step


class SamplingFailureError(ChoraleError):
    """ODE sampling produced a non-finite state."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class EvaluationError(ChoraleError):
    """An evaluation protocol could not be completed."""


class InsufficientOverlapError(EvaluationError):
    """No mutually voiced frames to compare."""


class ProtocolError(EvaluationError):
    """Protocol preconditions not met (e.g. fewer than two singer profiles)."""


# Process exit codes used by the CLI.
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_TRAINING = 4
EXIT_EVALUATION = 5
