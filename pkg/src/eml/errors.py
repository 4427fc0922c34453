"""Exception hierarchy shared by every layer of the engine."""


class EMLError(Exception):
    """Base class for all engine errors."""


class RangeError(EMLError, ValueError):
    """A real value does not fit the fixed-point grid (or a field value is in the dead zone)."""


class DivisionByZero(EMLError, ZeroDivisionError):
    pass


class SessionMismatch(EMLError):
    pass


class DimensionMismatch(EMLError, ValueError):
    pass


class PreprocessingExhausted(EMLError):
    """Correlated randomness ran out (or was never provisioned)."""


class MacCheckFailed(EMLError):
    """The batched MAC check over opened values failed: someone tampered."""


class CorrelationCheckFailed(EMLError):
    """OT-based preprocessing produced material that failed its sacrifice check."""


class HandshakeFailure(EMLError):
    """A peer sent malformed group elements during base OT."""


class AgreementMismatch(EMLError):
    def __init__(self, field, ours=None, theirs=None):
        self.field = field
        self.ours = ours
        self.theirs = theirs
        msg = f"parameter disagreement on {field!r}"
        if ours is not None or theirs is not None:
            msg += f" (ours={ours!r}, peer={theirs!r})"
        super().__init__(msg)


class VersionMismatch(AgreementMismatch):
    def __init__(self, ours=None, theirs=None):
        super().__init__("version", ours, theirs)


class ConnectionFailure(EMLError, ConnectionError):
    pass


class FrameTooLarge(EMLError):
    pass


class ProtocolAbort(EMLError):
    """The peer sent an abort frame."""


class ParseError(EMLError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class LengthMismatch(EMLError, ValueError):
    pass


class AtomOverflow(EMLError, ValueError):
    pass


class CoincidentAtoms(EMLError, ValueError):
    pass


class SingularKernel(EMLError, ArithmeticError):
    pass


class SplitMismatch(EMLError):
    """A session tried to serve models trained on different train splits."""
