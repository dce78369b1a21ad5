"""Exception types shared across the package.

Every error carries a short ``code`` string so that the CLI and the wire
protocol can report it as a single machine-parseable token.
"""

from __future__ import annotations


class EnclaveMLError(Exception):
    code = "Error"

    def __init__(self, detail: str = ""):
        super().__init__(detail or self.code)
        self.detail = detail


class DecodeError(EnclaveMLError):
    code = "DecodeError"


# --- CAS -------------------------------------------------------------------

class DuplicateSession(EnclaveMLError):
    code = "DuplicateSession"


class InvalidPolicy(EnclaveMLError):
    code = "InvalidPolicy"


class UnknownSession(EnclaveMLError):
    code = "UnknownSession"


class AttestationRejected(EnclaveMLError):
    code = "AttestationRejected"

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class ChannelBindingMismatch(EnclaveMLError):
    code = "ChannelBindingMismatch"


class DuplicateScope(EnclaveMLError):
    code = "DuplicateScope"


class UnknownScope(EnclaveMLError):
    code = "UnknownScope"


class StaleCounter(EnclaveMLError):
    code = "StaleCounter"

    def __init__(self, stored_value: int):
        super().__init__(f"stored value is {stored_value}")
        self.stored_value = stored_value


class Unauthorized(EnclaveMLError):
    code = "Unauthorized"


class StoreCorrupt(EnclaveMLError):
    code = "StoreCorrupt"


class AuditChainBroken(EnclaveMLError):
    code = "AuditChainBroken"


# --- shields ---------------------------------------------------------------

class IntegrityError(EnclaveMLError):
    """Authentication or bounds failure on shielded data.

    ``where`` is either a chunk index or the string ``"manifest"``.
    """

    code = "IntegrityError"

    def __init__(self, where: int | str, detail: str = ""):
        super().__init__(f"{where}: {detail}" if detail else str(where))
        self.where = where


class FreshnessError(EnclaveMLError):
    code = "FreshnessError"

    def __init__(self, expected: int, stored: int):
        super().__init__(f"manifest counter {expected}, authoritative counter {stored}")
        self.expected = expected
        self.stored = stored


class HandshakeError(EnclaveMLError):
    code = "HandshakeError"

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class BindError(EnclaveMLError):
    code = "BindError"


class NotEstablished(EnclaveMLError):
    code = "NotEstablished"


class FrameTooLarge(EnclaveMLError):
    code = "FrameTooLarge"


class PeerClosed(EnclaveMLError):
    code = "PeerClosed"


# --- syscall bridge / ML ---------------------------------------------------

class QueueFull(EnclaveMLError):
    code = "QueueFull"


class ShapeMismatch(EnclaveMLError):
    code = "ShapeMismatch"


class ModelFormatError(EnclaveMLError):
    code = "ModelFormatError"


class EmptyInput(EnclaveMLError):
    code = "EmptyInput"
