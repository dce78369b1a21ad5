"""Length-prefixed binary encoding.

Two layers share the same 4-byte big-endian length prefix:

* frames on a stream: ``len:u32 || payload``, capped at :data:`MAX_FRAME`;
* field lists inside a payload: ``(len:u32 || field)*``, used for every
  canonical encoding in the package (quotes, protocol messages, manifests
  bodies are fixed-layout and do not use this).

A protocol message is ``tag:u8 || fields``.
"""

from __future__ import annotations

import struct
from typing import Callable

from .errors import DecodeError, FrameTooLarge

MAX_FRAME = 64 * 1024 * 1024
_LEN = struct.Struct(">I")
_U64 = struct.Struct(">Q")


def encode_frame(payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME:
        raise FrameTooLarge(f"{len(payload)} bytes exceeds {MAX_FRAME}")
    return _LEN.pack(len(payload)) + payload


def read_frame(recv_exact: Callable[[int], bytes]) -> bytes:
    (n,) = _LEN.unpack(recv_exact(4))
    if n > MAX_FRAME:
        raise FrameTooLarge(f"peer announced {n} bytes")
    return recv_exact(n) if n else b""


def pack_fields(*fields: bytes) -> bytes:
    out = bytearray()
    for f in fields:
        out += _LEN.pack(len(f))
        out += f
    return bytes(out)


def unpack_fields(data: bytes, count: int | None = None) -> list[bytes]:
    fields = []
    pos = 0
    view = memoryview(data)
    while pos < len(data):
        if pos + 4 > len(data):
            raise DecodeError("truncated length prefix")
        (n,) = _LEN.unpack_from(data, pos)
        pos += 4
        if n > len(data) - pos:
            raise DecodeError("field length exceeds remaining input")
        fields.append(bytes(view[pos:pos + n]))
        pos += n
    if count is not None and len(fields) != count:
        raise DecodeError(f"expected {count} fields, got {len(fields)}")
    return fields


def u64(value: int) -> bytes:
    return _U64.pack(value)


def parse_u64(data: bytes) -> int:
    if len(data) != 8:
        raise DecodeError("u64 field must be 8 bytes")
    return _U64.unpack(data)[0]


def encode_message(tag: int, *fields: bytes) -> bytes:
    return bytes([tag]) + pack_fields(*fields)


def decode_message(data: bytes) -> tuple[int, list[bytes]]:
    if not data:
        raise DecodeError("empty message")
    return data[0], unpack_fields(data[1:])
