"""Error types and their command-line exit codes."""
from typing import Optional


class CsqnError(Exception):
    """Base error carrying the exit code the CLI reports for it."""

    exit_code = 1
    category = "error"

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ConfigError(CsqnError):
    """Invalid configuration, overrides or incompatible inputs."""

    exit_code = 2
    category = "config"


class DataMissingError(CsqnError):
    """Dataset files or run directories are absent."""

    exit_code = 3
    category = "data"


class DataFormatError(CsqnError):
    """Dataset files exist but cannot be parsed."""

    exit_code = 3
    category = "data"


class NumericalError(CsqnError):
    """Numerical abort: non-finite values, singular systems, rejected sampling."""

    exit_code = 4
    category = "numerical"


class ShapeError(ValueError):
    """Operand shapes violate an operation's precondition."""
