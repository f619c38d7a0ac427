"""Exception hierarchy shared by all modules.

CLI exit-code mapping: DomainError -> usage (1), DataError/FormatError/
TruncationError -> data (2), NumericError -> numeric (3).
"""

from __future__ import annotations


class DualtokError(Exception):
    """Base class for all library errors."""


class DomainError(DualtokError):
    """An argument or configuration violates a documented precondition."""


class DataError(DualtokError):
    """Input data violates an invariant (bad ids, dims, non-finite values)."""


class FormatError(DataError):
    """A byte stream is not a well-formed file of the expected format."""


class TruncationError(FormatError):
    """A file ended before a complete record could be read."""

    def __init__(self, message: str, offset: int, needed: int):
        super().__init__(f"{message} (offset {offset}, needed {needed} more bytes)")
        self.offset = offset
        self.needed = needed


class NumericError(DualtokError):
    """A numeric computation produced non-finite values."""
