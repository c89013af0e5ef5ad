"""Exception types shared across the package."""


class TTAError(Exception):
    """Base class for all package errors."""


class DegenerateInput(TTAError):
    pass


class NoConvergence(TTAError):
    pass


class ShapeMismatch(TTAError, ValueError):
    pass


class EmptyCorpus(TTAError, ValueError):
    pass


class CacheMismatch(TTAError):
    pass


class NonFiniteLoss(TTAError, FloatingPointError):
    pass


class UnknownSubject(TTAError, KeyError):
    pass


class FormatError(TTAError, ValueError):
    """Malformed binary record: bad magic, unsupported version or truncation."""
