"""Exception types shared across the package.

``UserInputError`` subclasses mark problems the caller can fix (bad files,
bad arguments); everything else is an internal condition. The CLI maps the
two groups to exit codes 1 and 2.
"""


class ChoreokitError(Exception):
    """Base class for all package errors."""


class UserInputError(ChoreokitError):
    """Invalid input supplied by the caller."""


class DimensionError(UserInputError):
    """An array argument has the wrong cardinality or shape."""


class SingularInputError(UserInputError):
    """A geometric input is degenerate (zero or parallel columns)."""


class InvalidMotionError(UserInputError):
    """A motion container violates its construction invariants."""


class AmbiguousAxesError(UserInputError):
    """No coordinate axis shows a positive mean head-over-pelvis offset."""


class DegenerateYawError(UserInputError):
    """The hip vector has no usable ground-plane direction."""


class UnsupportedPrimitiveError(UserInputError):
    """Requested motion primitive is not in the supported set."""


class UnknownPredicateError(UserInputError):
    """Requested kinematic predicate name is not defined."""


class DegenerateEmbeddingError(ChoreokitError):
    """An embedding collapsed to (near) zero norm before normalisation."""


class CovarianceUndefinedError(UserInputError):
    """A batch is too small for a covariance estimate."""


class EmptyBankError(UserInputError):
    """An embedding bank has no entries."""


class BankMismatchError(UserInputError):
    """Bank kind does not match the requested retrieval direction."""


class TrainingDivergedError(ChoreokitError):
    """A training loss became non-finite."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")


class BackboneDriftError(ChoreokitError):
    """Frozen backbone parameters changed during fine-tuning."""


class GenerationError(ChoreokitError):
    """A conditioned generator failed while producing a sample."""


class StageDependencyError(UserInputError):
    """A pipeline stage is missing an input artifact."""

    def __init__(self, stage: str, message: str = ""):
        self.stage = stage
        super().__init__(message or f"stage '{stage}' is missing a required input")


class SchemaError(UserInputError):
    """Report data does not match the expected schema."""
