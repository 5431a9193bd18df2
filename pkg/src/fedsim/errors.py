"""Exception hierarchy shared by every fedsim module.

Each class carries the CLI exit code it maps to.
"""


class FedSimError(Exception):
    exit_code = 4


class ConfigurationError(FedSimError, ValueError):
    exit_code = 2


class DataError(FedSimError, ValueError):
    exit_code = 3


class PreconditionError(FedSimError, ValueError):
    exit_code = 3


class ProtocolError(FedSimError):
    """Client update incompatible with the global model."""

    exit_code = 4


class EmptyRoundError(FedSimError):
    exit_code = 4


class UndefinedStatisticError(FedSimError, ArithmeticError):
    exit_code = 4


class InfeasibleAlignmentError(FedSimError):
    """No CTC path maps the frames onto the transcript.

    The loss is infinite; ``loss`` is kept on the exception so callers that
    want a number can still read one.
    """

    exit_code = 3
    loss = float("inf")
