"""Exception hierarchy shared by all modules."""


class IdfError(Exception):
    """Base class for package errors."""


class ContractError(IdfError, ValueError):
    """An operation was called outside its preconditions."""


class ValidationError(IdfError, ValueError):
    """Input data violate a data-model invariant."""


class ParseError(ValidationError):
    """A CSV row could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EstimationError(IdfError, RuntimeError):
    """A statistical estimate could not be formed from the data."""


class ConvergenceError(EstimationError):
    """The sampler did not reach the convergence threshold."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
