"""Exception hierarchy.

Validation problems derive from :class:`ValidationError` (CLI exit code 2),
numerical failures from :class:`NumericalError` (CLI exit code 4).
"""


class FairMSMError(Exception):
    """Base class for all package errors."""


class ValidationError(FairMSMError, ValueError):
    pass


class NumericalError(FairMSMError, ArithmeticError):
    pass


class DuplicateTransition(ValidationError):
    pass


class SelfLoop(ValidationError):
    pass


class UnknownState(ValidationError):
    pass


class IllegalTransition(ValidationError):
    pass


class MissingIndividual(ValidationError):
    pass


class UnknownLevel(ValidationError):
    pass


class UnknownCovariate(ValidationError):
    pass


class LevelMismatch(ValidationError):
    pass


class NonContinuous(ValidationError):
    pass


class EmptySample(ValidationError):
    pass


class InsufficientGroups(ValidationError):
    pass


class ModeModelMismatch(ValidationError):
    pass


class Collinear(NumericalError):
    def __init__(self, message, dependent=()):
        super().__init__(message)
        self.dependent = tuple(dependent)


class Diverged(NumericalError):
    pass


class NumericalOverflow(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
