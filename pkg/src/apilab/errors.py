"""Exception types mapped onto CLI exit codes."""


class ApiLabError(Exception):
    exit_code = 1


class ConfigurationError(ApiLabError, ValueError):
    """Bad dimensions, out-of-range parameters, malformed input files."""

    exit_code = 1


class NumericalInvariantError(ApiLabError, ArithmeticError):
    """A numerical invariant that must hold on valid inputs was violated."""

    exit_code = 3
