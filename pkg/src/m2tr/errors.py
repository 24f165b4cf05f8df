"""Exception hierarchy; the CLI maps each family onto an exit code."""


class M2TRError(Exception):
    exit_code = 1


class ConfigError(M2TRError, ValueError):
    exit_code = 2


class ShapeError(ConfigError):
    """Operand shapes do not satisfy an operation's contract."""


class DataError(M2TRError, ValueError):
    exit_code = 3


class NumericError(M2TRError, ArithmeticError):
    exit_code = 4


class ContractError(M2TRError, RuntimeError):
    """Misuse of the gradient engine (non-scalar loss, replayed tape)."""

    exit_code = 4
