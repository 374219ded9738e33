"""Exception types shared across modules."""


class LocoreError(Exception):
    """Base class for package errors."""


class ShapeError(LocoreError, ValueError):
    """Array or configuration dimensions do not line up."""


class DegenerateError(LocoreError, ValueError):
    """A reduction has nothing to reduce over (fully masked row or loss)."""


class NonFiniteGradientError(LocoreError, FloatingPointError):
    pass


class NonFiniteLossError(LocoreError, FloatingPointError):
    pass


class BankFormatError(LocoreError, ValueError):
    """Base for descriptor-bank parse failures."""


class BadMagicError(BankFormatError):
    pass


class VersionMismatchError(BankFormatError):
    pass


class TruncatedPayloadError(BankFormatError):
    pass


class InconsistentShapeError(BankFormatError):
    pass


class CheckpointFormatError(LocoreError, ValueError):
    pass
