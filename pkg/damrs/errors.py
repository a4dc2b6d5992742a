"""
errors.py - Error types raised across the pipeline
Each error carries the process exit code the CLI reports for it.
"""

from typing import Optional


class DamrsError(Exception):
    """Base error for every failure the pipeline reports on purpose"""

    exit_code = 1


class ParseError(DamrsError):
    def __init__(self, message: str, path: Optional[str] = None, line_number: Optional[int] = None):
        self.path = path
        self.line_number = line_number
        location = ""
        if path is not None:
            location = f"{path}"
            if line_number is not None:
                location += f":{line_number}"
            location += ": "
        super().__init__(f"{location}{message}")


class DimensionError(DamrsError):
    pass


class IntegrityError(DamrsError):
    pass


class ConfigError(DamrsError):
    pass


class SaturationError(DamrsError):
    pass


class ContractError(DamrsError):
    pass


class PreconditionError(DamrsError):
    pass


class UsageError(DamrsError):
    exit_code = 2


class DivergenceError(DamrsError):
    """Training produced a non-finite loss or gradient"""

    def __init__(self, message: str, report=None, last_finite_epoch: Optional[int] = None):
        self.report = report
        self.last_finite_epoch = last_finite_epoch
        super().__init__(message)
