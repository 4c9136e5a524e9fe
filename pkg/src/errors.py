"""Exception hierarchy shared by the library and the CLI exit codes."""


class DiscError(Exception):
    """Base class for all counterfactual-pipeline errors.

    Attributes:
        exit_code: Process exit code the CLI returns for this error
    """

    exit_code: int = 1


class ConfigError(DiscError, ValueError):
    """Invalid configuration, arguments or schema."""

    exit_code = 2


class DatasetError(ConfigError):
    """Dataset cannot be built or violates its invariants."""


class ShapeError(ConfigError):
    """Tensor shape does not match what the model or metric expects."""

    def __init__(self, expected, got, what: str = 'input') -> None:
        self.expected = tuple(expected)
        self.got = tuple(got)
        super().__init__(
            f"{what} shape mismatch: expected {self.expected}, got {self.got}"
        )


class TrainingDivergenceError(DiscError, RuntimeError):
    """Training produced a non-finite loss."""

    exit_code = 3


class IncompatibilityError(DiscError):
    """Objective needs a bundle component that is not present."""

    exit_code = 4


class MissingArtifactError(DiscError, FileNotFoundError):
    """A required artifact (bundle, generation output) is missing."""

    exit_code = 5
