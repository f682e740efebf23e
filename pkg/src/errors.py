# errors.py - Error taxonomy shared by every layer of the simulator
"""
All library failures raise a subclass of AceError. Each class carries the
SBI-style code that the ABI dispatcher writes into the caller's a0.
"""

SUCCESS = 0


class AceError(Exception):
    """Base class. `code` is the value surfaced through the ABI."""

    code = -1
    name = "Failed"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.name)
        self.details = details

    def __str__(self) -> str:
        base = super().__str__()
        if not self.details:
            return base
        extra = " ".join(f"{k}={v}" for k, v in self.details.items())
        return f"{base} ({extra})"


# --- SBI standard codes ---

class UnknownCall(AceError):
    code, name = -2, "NotSupported"


class InvalidParam(AceError):
    code, name = -3, "InvalidParam"


class Denied(AceError):
    code, name = -4, "Denied"


class InvalidAddress(AceError):
    code, name = -5, "InvalidAddress"


class AlreadyAvailable(AceError):
    code, name = -6, "AlreadyAvailable"


class AlreadyStarted(AceError):
    code, name = -7, "AlreadyStarted"


class AlreadyStopped(AceError):
    code, name = -8, "AlreadyStopped"


class InvalidState(AceError):
    code, name = -10, "InvalidState"


# --- Simulator-specific codes ---

class MalformedTable(AceError):
    code, name = -101, "MalformedTable"


class OutOfMemory(AceError):
    code, name = -102, "OutOfMemory"


class ParseError(AceError):
    """Malformed input file or blob. Carries line/field diagnostics when known."""

    code, name = -103, "ParseError"

    def __init__(self, message: str = "", line: int | None = None, field: str | None = None):
        details = {}
        if line is not None:
            details["line"] = line
        if field is not None:
            details["field"] = field
        super().__init__(message, **details)
        self.line = line
        self.field = field


class NoMatchingLockbox(AceError):
    code, name = -104, "NoMatchingLockbox"


class AuthFailure(AceError):
    code, name = -105, "AuthFailure"


class AttestationFailed(AceError):
    code, name = -106, "AttestationFailed"


class NoSuchTvm(AceError):
    code, name = -107, "NoSuchTvm"


class HartNotStarted(AceError):
    code, name = -108, "HartNotStarted"


class TvmBusy(AceError):
    code, name = -109, "TvmBusy"


class AlreadyMapped(AceError):
    code, name = -110, "AlreadyMapped"


class NoSuchSecret(AceError):
    code, name = -111, "NoSuchSecret"


class FlowViolation(AceError):
    code, name = -112, "FlowViolation"


class UnsupportedAlgorithm(AceError):
    code, name = -113, "UnsupportedAlgorithm"


class ForeignToken(AceError):
    code, name = -114, "ForeignToken"


class AccessFault(AceError):
    code, name = -115, "AccessFault"


class GuestFault(AceError):
    code, name = -116, "GuestFault"


class ConfigError(AceError):
    code, name = -117, "ConfigError"


_BY_CODE = {cls.code: cls for cls in (AceError, *AceError.__subclasses__())}
_BY_NAME = {cls.name: cls for cls in _BY_CODE.values()}
_BY_NAME["UnknownCall"] = UnknownCall


def error_name(code: int) -> str:
    """Symbolic name for an ABI return code ("ok" for success)."""
    if code == SUCCESS:
        return "ok"
    cls = _BY_CODE.get(code)
    return cls.name if cls else f"E{code}"


def code_for(name: str) -> int:
    """Inverse of error_name; raises KeyError for unknown names."""
    if name in ("ok", "Success"):
        return SUCCESS
    return _BY_NAME[name].code


def to_unsigned(code: int) -> int:
    """Two's-complement 64-bit register image of a (possibly negative) code."""
    return code & 0xFFFF_FFFF_FFFF_FFFF


def to_signed(word: int) -> int:
    word &= 0xFFFF_FFFF_FFFF_FFFF
    return word - (1 << 64) if word >> 63 else word
