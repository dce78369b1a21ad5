"""CAS wire messages, carried one per frame.

Every message is ``tag:u8`` followed by length-prefixed fields:

====  ==============  ==============================================
tag   message         fields
====  ==============  ==============================================
0x01  AttestRequest   session, quote
0x02  AttestResponse  bundle, injections
0x03  Error           code, detail, stored_value (u64 or empty)
0x04  CounterOp       op (register|advance|read), scope, expected:u64, writer
0x05  CounterValue    value:u64
====  ==============  ==============================================
"""

from __future__ import annotations

from .. import errors
from ..errors import DecodeError, EnclaveMLError
from ..wire import decode_message, encode_message, pack_fields, parse_u64, u64, unpack_fields
from .policy import Injection

ATTEST_REQUEST = 0x01
ATTEST_RESPONSE = 0x02
ERROR = 0x03
COUNTER_OP = 0x04
COUNTER_VALUE = 0x05

_ERRORS = {
    cls.code: cls
    for cls in vars(errors).values()
    if isinstance(cls, type) and issubclass(cls, EnclaveMLError)
}


def attest_request(session: str, quote: bytes) -> bytes:
    return encode_message(ATTEST_REQUEST, session.encode(), quote)


def attest_response(bundle: bytes, injections: list[Injection]) -> bytes:
    inj = pack_fields(*(pack_fields(i.secret.encode(), i.target.encode()) for i in injections))
    return encode_message(ATTEST_RESPONSE, bundle, inj)


def parse_injections(data: bytes) -> list[Injection]:
    out = []
    for item in unpack_fields(data):
        secret, target = unpack_fields(item, 2)
        out.append(Injection(secret.decode(), target.decode()))
    return out


def counter_op(op: str, scope: str, expected: int = 0, writer: bytes = b"") -> bytes:
    return encode_message(COUNTER_OP, op.encode(), scope.encode(), u64(expected), writer)


def counter_value(value: int) -> bytes:
    return encode_message(COUNTER_VALUE, u64(value))


def error(exc: EnclaveMLError) -> bytes:
    extra = u64(exc.stored_value) if isinstance(exc, errors.StaleCounter) else b""
    return encode_message(ERROR, exc.code.encode(), str(exc.detail).encode(), extra)


def raise_error(fields: list[bytes]) -> None:
    if len(fields) != 3:
        raise DecodeError("malformed error message")
    code, detail, extra = fields[0].decode(), fields[1].decode(), fields[2]
    cls = _ERRORS.get(code, EnclaveMLError)
    if cls is errors.StaleCounter:
        raise errors.StaleCounter(parse_u64(extra))
    if cls is errors.AttestationRejected:
        raise errors.AttestationRejected(detail)
    if cls in (errors.IntegrityError, errors.FreshnessError, errors.HandshakeError):
        raise EnclaveMLError(f"{code}: {detail}")
    raise cls(detail)


def expect(data: bytes, tag: int) -> list[bytes]:
    got, fields = decode_message(data)
    if got == ERROR:
        raise_error(fields)
    if got != tag:
        raise DecodeError(f"expected message {tag:#x}, got {got:#x}")
    return fields
