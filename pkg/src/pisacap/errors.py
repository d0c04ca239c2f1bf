"""Exception types shared across the package."""


class PisacapError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(PisacapError):
    """Input file violates the expected column schema or value domain."""


class ParseError(PisacapError):
    """A cell could not be parsed into a finite number."""


class AlignmentError(PisacapError):
    """External prediction file does not line up with the dataset rows."""


class FoldCompositionError(PisacapError):
    """A cross-fitting training complement is missing a treatment arm."""


class ConvergenceError(PisacapError):
    """Iterative fit did not reach the requested tolerance."""

    def __init__(self, message, gradient_norm=None):
        super().__init__(message)
        self.gradient_norm = gradient_norm


class SeparationError(PisacapError):
    """Logistic fit diverged, indicating (quasi-)separated classes."""


class EmptySubgroupError(PisacapError):
    """No rows satisfy the subgroup threshold; inference is undefined."""


class VarianceUndefinedError(PisacapError):
    """Too few subgroup rows to estimate a variance."""


class DegeneratePerturbationError(PisacapError):
    """Perturbation denominators kept collapsing past the redraw cap."""


class BlackBoxPredictorError(PisacapError):
    """Externally supplied subgroup scores cannot be evaluated at new points."""
