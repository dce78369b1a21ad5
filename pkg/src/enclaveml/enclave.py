"""Software-simulated enclave identity.

A simulated platform owns an Ed25519 attestation key and a 32-byte device
secret. Enclave identity is a SHA-256 measurement over (code, config);
quotes bind that measurement to 64 bytes of caller-chosen report data and
are signed with the platform key.

Quote wire layout (all lengths u32 big-endian)::

    len=32 | measurement
    len=64 | report_data
    len=16 | device_id
    u64    | timestamp (unix seconds)
    len=64 | ed25519 signature over every preceding byte
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import secrets
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import DecodeError

REPORT_DATA_LEN = 64
DEVICE_ID_LEN = 16
_LEN = struct.Struct(">I")
_U64 = struct.Struct(">Q")


@dataclass(frozen=True)
class Measurement:
    digest: bytes

    def __post_init__(self):
        if len(self.digest) != 32:
            raise ValueError("measurement digest must be 32 bytes")

    @property
    def hex(self) -> str:
        return self.digest.hex()

    @classmethod
    def from_hex(cls, text: str) -> "Measurement":
        return cls(bytes.fromhex(text))


@dataclass(frozen=True)
class ReportData:
    payload: bytes

    def __post_init__(self):
        if len(self.payload) != REPORT_DATA_LEN:
            raise ValueError("report data must be exactly 64 bytes")

    @classmethod
    def pad(cls, data: bytes) -> "ReportData":
        if len(data) > REPORT_DATA_LEN:
            raise ValueError("report data longer than 64 bytes")
        return cls(data.ljust(REPORT_DATA_LEN, b"\0"))


def device_id_for(public_key: Ed25519PublicKey) -> bytes:
    return hashlib.sha256(public_key.public_bytes_raw()).digest()[:DEVICE_ID_LEN]


@dataclass(frozen=True)
class DeviceKey:
    private_key: Ed25519PrivateKey
    device_id: bytes

    @classmethod
    def generate(cls) -> "DeviceKey":
        return cls.from_private_key(Ed25519PrivateKey.generate())

    @classmethod
    def from_private_key(cls, key: Ed25519PrivateKey) -> "DeviceKey":
        return cls(key, device_id_for(key.public_key()))

    @property
    def public_key(self) -> Ed25519PublicKey:
        return self.private_key.public_key()


@dataclass(frozen=True)
class SealingKey:
    key: bytes


@dataclass(frozen=True)
class Platform:
    """A simulated SGX-capable host: attestation key plus sealing secret."""

    device_key: DeviceKey
    device_secret: bytes

    @classmethod
    def generate(cls) -> "Platform":
        return cls(DeviceKey.generate(), secrets.token_bytes(32))

    @property
    def device_id(self) -> bytes:
        return self.device_key.device_id

    def to_json(self) -> dict:
        return {
            "device_id": self.device_id.hex(),
            "private_key": self.device_key.private_key.private_bytes_raw().hex(),
            "device_secret": self.device_secret.hex(),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "Platform":
        key = Ed25519PrivateKey.from_private_bytes(bytes.fromhex(doc["private_key"]))
        return cls(DeviceKey.from_private_key(key), bytes.fromhex(doc["device_secret"]))

    def save(self, path: str | os.PathLike) -> None:
        p = Path(path)
        p.write_text(json.dumps(self.to_json(), indent=2))
        p.chmod(0o600)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Platform":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Quote:
    measurement: Measurement
    report_data: ReportData
    device_id: bytes
    timestamp: int
    signature: bytes = b""

    def body(self) -> bytes:
        return b"".join([
            _LEN.pack(32), self.measurement.digest,
            _LEN.pack(REPORT_DATA_LEN), self.report_data.payload,
            _LEN.pack(DEVICE_ID_LEN), self.device_id,
            _U64.pack(self.timestamp),
        ])

    def encode(self) -> bytes:
        return self.body() + _LEN.pack(len(self.signature)) + self.signature

    @classmethod
    def decode(cls, data: bytes) -> "Quote":
        pos = 0

        def fixed(n: int) -> bytes:
            nonlocal pos
            if pos + 4 > len(data):
                raise DecodeError("truncated quote")
            (declared,) = _LEN.unpack_from(data, pos)
            if declared != n or pos + 4 + n > len(data):
                raise DecodeError("bad field length in quote")
            out = data[pos + 4:pos + 4 + n]
            pos += 4 + n
            return out

        digest = fixed(32)
        rd = fixed(REPORT_DATA_LEN)
        dev = fixed(DEVICE_ID_LEN)
        if pos + 8 > len(data):
            raise DecodeError("truncated quote")
        (ts,) = _U64.unpack_from(data, pos)
        pos += 8
        sig = fixed(64)
        if pos != len(data):
            raise DecodeError("trailing bytes after quote")
        return cls(Measurement(digest), ReportData(rd), dev, ts, sig)


class RejectReason(str, enum.Enum):
    BAD_SIGNATURE = "BadSignature"
    UNKNOWN_DEVICE = "UnknownDevice"
    MEASUREMENT_NOT_ALLOWED = "MeasurementNotAllowed"


@dataclass(frozen=True)
class VerificationResult:
    accepted: bool
    reason: RejectReason | None = None

    @classmethod
    def accept(cls) -> "VerificationResult":
        return cls(True)

    @classmethod
    def reject(cls, reason: RejectReason) -> "VerificationResult":
        return cls(False, reason)


@dataclass(frozen=True)
class TrustRoot:
    """Static registry of device attestation keys, immutable once loaded."""

    keys: Mapping[bytes, Ed25519PublicKey] = field(default_factory=dict)

    @classmethod
    def of(cls, devices: Iterable[DeviceKey | Platform]) -> "TrustRoot":
        keys = {}
        for d in devices:
            dk = d.device_key if isinstance(d, Platform) else d
            keys[dk.device_id] = dk.public_key
        return cls(keys)

    @classmethod
    def from_json(cls, entries: list[dict]) -> "TrustRoot":
        keys = {}
        for e in entries:
            pub = Ed25519PublicKey.from_public_bytes(bytes.fromhex(e["public_key"]))
            dev = bytes.fromhex(e["device_id"])
            if dev != device_id_for(pub):
                raise ValueError(f"device id {e['device_id']} does not match its key")
            keys[dev] = pub
        return cls(keys)

    def to_json(self) -> list[dict]:
        return [
            {"device_id": dev.hex(), "public_key": pub.public_bytes_raw().hex()}
            for dev, pub in sorted(self.keys.items())
        ]

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrustRoot":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    def __len__(self) -> int:
        return len(self.keys)


def measure(code: bytes, config: bytes) -> Measurement:
    h = hashlib.sha256()
    h.update(_U64.pack(len(code)))
    h.update(code)
    h.update(_U64.pack(len(config)))
    h.update(config)
    return Measurement(h.digest())


def generate_quote(
    m: Measurement, rd: ReportData, dk: DeviceKey, timestamp: int | None = None
) -> Quote:
    if timestamp is None:
        timestamp = int(time.time())
    unsigned = Quote(m, rd, dk.device_id, timestamp)
    return Quote(m, rd, dk.device_id, timestamp, dk.private_key.sign(unsigned.body()))


def verify_quote_local(
    q: Quote | bytes, expected: Iterable[Measurement], root: TrustRoot
) -> VerificationResult:
    if not len(root):
        raise ValueError("trust root is empty")
    if isinstance(q, (bytes, bytearray)):
        q = Quote.decode(bytes(q))
    pub = root.keys.get(q.device_id)
    if pub is None:
        return VerificationResult.reject(RejectReason.UNKNOWN_DEVICE)
    try:
        pub.verify(q.signature, q.body())
    except InvalidSignature:
        return VerificationResult.reject(RejectReason.BAD_SIGNATURE)
    if q.measurement not in set(expected):
        return VerificationResult.reject(RejectReason.MEASUREMENT_NOT_ALLOWED)
    return VerificationResult.accept()


def verify_quote_remote_sim(
    q: Quote | bytes,
    expected: Iterable[Measurement],
    root: TrustRoot,
    wan_latency: float,
    round_trips: int = 2,
) -> VerificationResult:
    """Same decision as :func:`verify_quote_local`, after simulated WAN legs.

    Each round trip sleeps for a request leg and a response leg of
    ``wan_latency`` seconds.
    """
    if wan_latency < 0:
        raise ValueError("wan_latency must be non-negative")
    for _ in range(round_trips):
        time.sleep(wan_latency)
        time.sleep(wan_latency)
    return verify_quote_local(q, expected, root)


def derive_sealing_key(device_secret: bytes, m: Measurement, label: str) -> SealingKey:
    if not label:
        raise ValueError("label must be non-empty")
    hkdf = HKDF(algorithm=hashes.SHA256(), length=32, salt=m.digest, info=label.encode())
    return SealingKey(hkdf.derive(device_secret))
