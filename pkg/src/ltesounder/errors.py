"""Exception types and the CLI exit codes they map to."""


class SounderError(Exception):
    exit_code = 1


class ConfigError(SounderError, ValueError):
    """Invalid configuration or parameter combination."""

    exit_code = 2


class FormatError(SounderError):
    """Malformed or unrecognised on-disk container."""

    exit_code = 3


class NumericalError(SounderError, ArithmeticError):
    """A numerical routine could not produce a valid result."""

    exit_code = 4
