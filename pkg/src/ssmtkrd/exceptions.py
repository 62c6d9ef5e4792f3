"""Exception hierarchy.

Every error derives from ``ValueError`` so callers that only care about
"bad input" can keep catching that.
"""


class SSMTokenReductionError(ValueError):
    """Base class for all errors raised by this package."""


class InvalidParameterError(SSMTokenReductionError):
    pass


class InvalidInputError(SSMTokenReductionError):
    pass


class InvalidPlanError(SSMTokenReductionError):
    """A reduction plan cannot be applied (bad counts or branch misalignment)."""


class UnsupportedModeError(SSMTokenReductionError):
    pass


class InfeasibleTargetError(SSMTokenReductionError):
    """The requested FLOPS reduction cannot be reached with the given layers."""

    def __init__(self, message, achievable_max):
        super().__init__(message)
        self.achievable_max = achievable_max


class CheckpointFormatError(SSMTokenReductionError):
    pass
