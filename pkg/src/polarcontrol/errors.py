"""Exception hierarchy.

Every failure raised by the package derives from :class:`ControlError`.
The three direct subclasses map onto the CLI exit codes.
"""


class ControlError(Exception):
    exit_code = 1


class PreconditionError(ControlError, ValueError):
    """Invalid input, configuration, or an unmet operation precondition."""

    exit_code = 2


class NumericalFailure(ControlError, RuntimeError):
    """An iterative method stalled, diverged or lost accuracy."""

    exit_code = 3


class VerificationFailure(ControlError, RuntimeError):
    """A self-check of a finished result did not pass."""

    exit_code = 4


class TruncationTooLarge(PreconditionError):
    pass


class GridMismatch(PreconditionError):
    pass


class NonUnitState(PreconditionError):
    pass


class VanishingCoupling(PreconditionError):
    pass


class RadiusTooLarge(PreconditionError):
    pass


class ConditionViolation(PreconditionError):
    pass


class NormDriftError(NumericalFailure):
    pass


class NoDescentFound(NumericalFailure):
    pass


class StagnationError(NumericalFailure):
    pass


class DivergenceError(NumericalFailure):
    pass


class IllConditioned(NumericalFailure):
    pass


class ResidualTooLarge(NumericalFailure):
    pass


class EndpointNonzero(NumericalFailure):
    pass


class OverlapNotCreated(NumericalFailure):
    pass
