class AdsegError(Exception):
    """Base class for all package errors."""


class DataError(AdsegError, ValueError):
    """Input data violates a documented contract (CLI exit code 1)."""
