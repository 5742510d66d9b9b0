"""Exception hierarchy shared by all modules."""


class NrError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(NrError, ValueError):
    pass


class ArgumentError(NrError, ValueError):
    pass


class FormatError(NrError):
    """Malformed checkpoint or dataset file.

    ``offset`` is the byte position where decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(NrError, RuntimeError):
    pass


class ConvergenceError(NrError, RuntimeError):
    def __init__(self, message, duality_gap):
        super().__init__(f"{message}; best duality gap {duality_gap:.3e}")
        self.duality_gap = duality_gap


class StratificationError(NrError, ValueError):
    pass


class CalibrationError(NrError, ValueError):
    pass
