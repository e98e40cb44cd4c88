"""Shared exception types."""


class FileFormatError(ValueError):
    """A binary file failed validation; the message carries the byte offset
    or record index where parsing stopped."""
