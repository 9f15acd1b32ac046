"""Exception types shared across the package."""


class SceneFlowError(Exception):
    """Base class for all package-specific errors."""


class InvalidArgumentError(SceneFlowError, ValueError):
    """An argument violates a documented precondition."""


class InvalidInputError(SceneFlowError, ValueError):
    """Input data is malformed (e.g. non-finite coordinates)."""


class ShapeError(SceneFlowError, ValueError):
    """Array dimensions do not match what an operation expects."""


class StateError(SceneFlowError, RuntimeError):
    """Objects are used out of their required sequencing (e.g. a backward
    pass against parameters that did not produce the tape)."""


class GenerationError(SceneFlowError, RuntimeError):
    """Procedural data generation could not satisfy its constraints."""


class TrainingDivergenceError(SceneFlowError, RuntimeError):
    """Training produced a non-finite loss or gradient.

    Carries the last finite checkpoint payload, when one exists, so callers
    can recover the most recent good state.
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class FormatError(SceneFlowError, ValueError):
    """A serialized file violates its documented format.

    ``line`` is the 1-based line number at which the problem was detected,
    or None when the error is not tied to a specific line.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
