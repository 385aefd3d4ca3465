class TCVCError(Exception):
    """Base class for all package errors."""


class InvalidChannelsError(TCVCError, ValueError):
    pass


class InvalidSizeError(TCVCError, ValueError):
    pass


class ImageTooSmallError(TCVCError, ValueError):
    pass


class ShapeMismatchError(TCVCError, ValueError):
    pass


class DatasetError(TCVCError):
    pass


class CheckpointError(TCVCError):
    pass


class ExtractorUnavailableError(TCVCError):
    pass


class NonFiniteLossError(TCVCError, FloatingPointError):
    """Raised by the trainer; ``record`` holds the offending loss values."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}
