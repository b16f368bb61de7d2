"""Exception types shared across the package."""


class PelocError(Exception):
    """Base class for all package errors."""


class ParseError(PelocError):
    """Malformed input file or payload. Carries the offending location."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field '{field}'")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)


class EmptyCorpus(PelocError):
    pass


class UnsupportedFormat(PelocError):
    pass


class UnsupportedRate(PelocError):
    pass


class InvalidDuration(PelocError):
    pass


class TooShort(PelocError):
    pass


class OutOfWindow(PelocError):
    pass


class WindowLargerThanSession(PelocError):
    pass


class MissingLabel(PelocError):
    pass


class AnnotatorError(PelocError):
    """Annotator failure. Retains the raw payload for debugging."""

    def __init__(self, message, raw_payload=None):
        self.raw_payload = raw_payload
        super().__init__(message)


class NotFound(PelocError):
    pass


class Conflict(PelocError):
    pass


class EmptyReview(PelocError):
    pass


class LayoutError(PelocError):
    pass


class VocabError(PelocError):
    pass


class ShapeError(PelocError):
    pass


class ConfigError(PelocError):
    pass


class NumericalError(PelocError):
    """Non-finite value during training. Names the offending parameter/layer
    and keeps the last good checkpoint when one exists."""

    def __init__(self, message, where=None, last_good_state=None):
        self.where = where
        self.last_good_state = last_good_state
        super().__init__(f"{message} (at {where})" if where else message)
