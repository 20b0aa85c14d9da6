from __future__ import annotations


class SimopacError(Exception):
    """Base class for every error raised by this package."""


class StorageFailure(SimopacError):
    pass


class NotFound(SimopacError):
    pass
