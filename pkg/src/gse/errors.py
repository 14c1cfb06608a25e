"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
NumericError -> 3.
"""


class GseError(Exception):
    """Base class for all package errors."""


class UsageError(GseError):
    """Bad arguments, bad configuration, or an unsupported request."""


class DataError(GseError):
    """Malformed or inconsistent input data (files, shapes, labels)."""


class ShapeError(DataError):
    """Array shapes do not conform to an operation's contract."""


class EmptyTargetActivity(DataError):
    """The designated target speaker has no active frame in the input."""


class NumericError(GseError):
    """A non-finite value appeared; carries the op id that produced it."""

    def __init__(self, op_id: str, message: str = "non-finite value"):
        super().__init__(f"{message} in op '{op_id}'")
        self.op_id = op_id
