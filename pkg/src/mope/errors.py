"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: validation 2, contract 3, format 4.
"""


class MopeError(Exception):
    exit_code = 1


class ValidationError(MopeError, ValueError):
    """Input data (corpus, config) failed validation."""

    exit_code = 2


class ContractError(MopeError, ValueError):
    """A documented precondition was violated by the caller."""

    exit_code = 3


class ShapeError(ContractError):
    pass


class CapacityError(ContractError):
    pass


class FormatError(MopeError, ValueError):
    """A checkpoint or serialized artifact is malformed or inconsistent."""

    exit_code = 4
