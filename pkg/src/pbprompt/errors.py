"""Exception types shared across the package."""


class PBPromptError(Exception):
    """Base class for all package errors."""


class DimensionError(PBPromptError, ValueError):
    """Shapes or axes do not line up for an operation."""


class ParameterError(PBPromptError, ValueError):
    """A hyperparameter or argument is outside its valid range."""


class NumericDegeneracyError(PBPromptError, ArithmeticError):
    """A computation hit a degenerate input (e.g. a zero-norm vector)."""


class ContractViolationError(PBPromptError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class ConvergenceError(PBPromptError, RuntimeError):
    """An iterative solver failed to reach its tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class BundleFormatError(PBPromptError, ValueError):
    """Base class for embedding-bundle file problems."""


class BadMagicError(BundleFormatError):
    """The file does not start with the bundle magic bytes."""


class BadVersionError(BundleFormatError):
    """The bundle format version is not supported."""


class TruncatedPayloadError(BundleFormatError):
    """The payload is shorter (or longer) than the header implies."""


class BundleValidationError(BundleFormatError):
    """A decoded bundle violates its invariants."""


class ProtocolError(PBPromptError, ValueError):
    """An evaluation protocol constraint was violated (e.g. overlapping splits)."""


class UndefinedMetricError(PBPromptError, ArithmeticError):
    """A metric is undefined for the given inputs (e.g. H with base = new = 0)."""


class NaNLossError(PBPromptError, ArithmeticError):
    """Training produced a non-finite loss.

    Carries the step index and the loss components at the failing step so the
    CLI can emit a diagnostic record before aborting.
    """

    def __init__(self, step: int, components: dict):
        super().__init__(f"non-finite loss at step {step}: {components}")
        self.step = step
        self.components = components
