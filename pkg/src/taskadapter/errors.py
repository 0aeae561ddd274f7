"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class TaskAdapterError(Exception):
    exit_code = 1


class ConfigError(TaskAdapterError, ValueError):
    exit_code = 2


class ContractError(TaskAdapterError, ValueError):
    """A shape or role precondition of an operation was violated."""

    exit_code = 2


class DataError(TaskAdapterError):
    exit_code = 3


class CorpusError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericError(TaskAdapterError, ArithmeticError):
    exit_code = 4
