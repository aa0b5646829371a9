#!/usr/bin/env python3
"""
Exception hierarchy for the regression lab.

Every error raised on purpose by the library derives from HarnessError and
carries the exit code the command-line interface reports for it:
0 success, 2 configuration error, 3 data/format error, 4 numeric failure.
"""


class HarnessError(Exception):
    """Base class for all deliberate library errors"""

    exit_code = 1


class ConfigurationError(HarnessError, ValueError):
    """Invalid or inconsistent configuration"""

    exit_code = 2


class ParameterError(ConfigurationError):
    """A scalar hyper-parameter outside its admissible range"""


class DimensionError(HarnessError, ValueError):
    """Shape mismatch between operands, or an invalid axis"""

    exit_code = 2


class DomainError(HarnessError, ValueError):
    """A value outside the mathematical domain of an operation"""

    exit_code = 3


class ContractError(HarnessError, RuntimeError):
    """API misuse, e.g. backward from a non-scalar tensor"""

    exit_code = 1


class DataFormatError(HarnessError):
    """Malformed input file"""

    exit_code = 3


class ParseError(DataFormatError):
    """A row that cannot be parsed; ``line`` is 1-based and counts the header"""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(DataFormatError):
    """Unknown column or unknown task name"""


class FormatError(DataFormatError):
    """Wrong magic bytes or trailing data in a binary file"""


class TruncationError(DataFormatError):
    """Binary payload shorter than the header declares"""


class EmptyTensorError(DataFormatError):
    """Header declares a tensor without any element"""


class NumericFailure(HarnessError):
    """Training produced a non-finite loss"""

    exit_code = 4


def exit_code_for(exc):
    """Map an exception to the CLI exit code"""
    if isinstance(exc, HarnessError):
        return exc.exit_code
    return 1
