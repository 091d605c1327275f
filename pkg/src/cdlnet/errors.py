"""Exception types shared across the package."""


class CDLError(Exception):
    """Base class for all package errors."""


class ContractError(CDLError, ValueError):
    """An argument violates an operation's precondition (shape, sign, mode)."""


class NumericError(CDLError, ArithmeticError):
    """A non-finite value appeared in an input or intermediate result.

    ``where`` names the offending stage (layer index, iteration, parameter).
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where
