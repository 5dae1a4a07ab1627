"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code (see ``collabdbn.cli``).
"""


class CollabDbnError(Exception):
    """Base class for all package errors."""


class ConfigError(CollabDbnError, ValueError):
    """Invalid configuration or arguments."""


class DataError(CollabDbnError, ValueError):
    """Problem with input data (missing files, bad values, shape mismatch)."""


class ParseError(DataError):
    """Malformed CSV input. ``line`` is the 1-based line number."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class ModelFormatError(DataError):
    """Unreadable or corrupt model file."""


class ProtocolError(CollabDbnError):
    """Violation of the round-exchange protocol."""


class TransportTimeout(ProtocolError):
    """A gather did not receive every expected peer message in time."""

    def __init__(self, round_, missing):
        self.round = round_
        self.missing = sorted(missing)
        super().__init__(
            f"round {round_}: timed out waiting for node(s) {', '.join(map(str, self.missing))}"
        )


class NumericError(CollabDbnError, ArithmeticError):
    """A NaN or infinity appeared in parameters or gradients."""
