"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit with 2,
data problems with 3 and numeric failures with 4.
"""


class LtfuseError(Exception):
    exit_code = 1


class ConfigError(LtfuseError, ValueError):
    """Invalid configuration. ``problems`` lists ``(field_path, message)`` pairs."""

    exit_code = 2

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [("", problems)]
        self.problems = list(problems)
        lines = [f"{path}: {msg}" if path else msg for path, msg in self.problems]
        super().__init__("; ".join(lines))


class DataError(LtfuseError, ValueError):
    exit_code = 3


class InvalidInputError(DataError):
    pass


class DimensionError(DataError):
    pass


class FormatError(DataError):
    """Malformed file content; ``row`` is the 0-based data row when known."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class MissingClassError(DataError):
    pass


class NumericError(LtfuseError, ArithmeticError):
    exit_code = 4


class DegenerateScoreError(NumericError):
    pass
