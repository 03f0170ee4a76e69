"""Exception hierarchy for the clearing engine."""


class LLRMError(Exception):
    """Base class for every error raised by this package."""


# -- input data ---------------------------------------------------------------

class InputError(LLRMError):
    """Problem with user-supplied data (files or in-memory objects)."""


class ParseError(InputError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class RadialityError(InputError):
    pass


class BaseError(InputError):
    pass


class MismatchError(InputError):
    pass


class StepError(InputError):
    pass


class CapacityError(InputError):
    pass


class OverReductionError(InputError):
    pass


# -- power flow ---------------------------------------------------------------

class PowerFlowError(LLRMError):
    pass


class DegenerateNetworkError(PowerFlowError, InputError):
    pass


class NonConvergenceError(PowerFlowError):
    """Sweep did not settle within ``max_iter``; ``result`` keeps the trace."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class NotConvergedError(PowerFlowError):
    pass


# -- market -------------------------------------------------------------------

class InvalidLevelError(LLRMError):
    pass


class OverCapacityError(LLRMError):
    pass


class InfeasibleError(LLRMError):
    pass


# The GA raises the same condition under its own name.
InfeasibleProblemError = InfeasibleError


class SpaceTooLargeError(LLRMError):
    pass
