"""Exception hierarchy shared by every module of the package."""


class AdaptBasesError(Exception):
    """Base class for all package errors."""


class ValidationError(AdaptBasesError, ValueError):
    """Invalid user input. The CLI maps these to exit code 2."""

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations) if violations else [message]


class EmptyDataset(ValidationError):
    pass


class InvalidPriorBounds(ValidationError):
    pass


class PartitionCountExceedsData(ValidationError):
    pass


class NonPositiveParameter(ValidationError):
    pass


class SpecMismatch(ValidationError):
    pass


class NonSquareLattice(ValidationError):
    pass


class DegenerateInput(ValidationError):
    pass


class EmptyPartition(ValidationError):
    pass


class FamilyMismatch(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class OutOfRange(ValidationError):
    pass


class InvalidProposal(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class DegenerateLabels(ValidationError):
    pass


class MissingCovariates(ValidationError):
    pass


class EmptyDraws(ValidationError):
    pass


class NumericalError(AdaptBasesError, ArithmeticError):
    """Numerical failure. The CLI maps these to exit code 3."""


class FactorizationFailure(NumericalError):
    pass


class SeparationOrDivergence(NumericalError):
    pass


class NonFiniteLogPosterior(NumericalError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class DisconnectedGraph(AdaptBasesError):
    """Agglomeration could not reach the requested cluster count."""

    def __init__(self, message, achievable):
        super().__init__(message)
        self.achievable = achievable


class LineageMismatch(AdaptBasesError):
    """Inputs of a CLI command were produced by unrelated runs."""
