"""Sealed CAS state: sessions, secrets, counters, and the audit chain.

The store serializes to canonical JSON (sorted keys, no whitespace) and is
sealed with AES-256-GCM under a key derived from the CAS measurement::

    b"SCS1" | nonce:12 | ciphertext+tag      (AAD = b"SCS1")

Audit entries chain as
``entry_hash = SHA-256(prev_hash || fields(u64 sequence, event, canonical detail))``
starting from 32 zero bytes.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from typing import Any

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from ..errors import AuditChainBroken, StoreCorrupt
from ..wire import pack_fields, u64

STORE_MAGIC = b"SCS1"
GENESIS = b"\0" * 32


class AuditEvent(str, enum.Enum):
    SESSION_CREATED = "SessionCreated"
    ATTEST_ACCEPTED = "AttestAccepted"
    ATTEST_REJECTED = "AttestRejected"
    SECRETS_ISSUED = "SecretsIssued"
    COUNTER_ADVANCED = "CounterAdvanced"


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


def audit_hash(prev_hash: bytes, sequence: int, event: str, detail: dict) -> bytes:
    body = pack_fields(u64(sequence), event.encode(), canonical_json(detail))
    return hashlib.sha256(prev_hash + body).digest()


@dataclass(frozen=True)
class AuditLogEntry:
    sequence: int
    event: AuditEvent
    detail: dict
    prev_hash: bytes
    entry_hash: bytes

    def to_json(self) -> dict:
        return {
            "sequence": self.sequence,
            "event": self.event.value,
            "detail": self.detail,
            "prev_hash": self.prev_hash.hex(),
            "entry_hash": self.entry_hash.hex(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "AuditLogEntry":
        return cls(d["sequence"], AuditEvent(d["event"]), d["detail"],
                   bytes.fromhex(d["prev_hash"]), bytes.fromhex(d["entry_hash"]))


def verify_audit_chain(entries: list[AuditLogEntry], head: bytes | None = None) -> bytes:
    """Recompute the chain; return the head hash or raise AuditChainBroken."""
    prev = GENESIS
    for expected_seq, e in enumerate(entries):
        if e.sequence != expected_seq:
            raise AuditChainBroken(f"entry {expected_seq} carries sequence {e.sequence}")
        if e.prev_hash != prev:
            raise AuditChainBroken(f"entry {expected_seq} does not link to its predecessor")
        if audit_hash(prev, e.sequence, e.event.value, e.detail) != e.entry_hash:
            raise AuditChainBroken(f"entry {expected_seq} hash mismatch")
        prev = e.entry_hash
    if head is not None and head != prev:
        raise AuditChainBroken("chain does not end at the recorded head")
    return prev


@dataclass
class CounterRecord:
    scope: str
    value: int = 0
    last_writer: bytes | None = None
    updated_at: int = 0

    def to_json(self) -> dict:
        return {
            "scope": self.scope,
            "value": self.value,
            "last_writer": self.last_writer.hex() if self.last_writer else None,
            "updated_at": self.updated_at,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CounterRecord":
        lw = d.get("last_writer")
        return cls(d["scope"], d["value"], bytes.fromhex(lw) if lw else None, d["updated_at"])


@dataclass
class StoredSession:
    session_id: str
    policy: dict          # policy JSON without secret values
    secrets: dict         # name -> bytes
    created_at: int


@dataclass
class Store:
    ca_cert_pem: bytes = b""
    ca_key_pem: bytes = b""
    server_cert_pem: bytes = b""
    server_key_pem: bytes = b""
    sessions: dict[str, StoredSession] = field(default_factory=dict)
    counters: dict[str, CounterRecord] = field(default_factory=dict)
    audit: list[AuditLogEntry] = field(default_factory=list)
    audit_head: bytes = GENESIS

    def append_audit(self, event: AuditEvent, detail: dict) -> AuditLogEntry:
        seq = len(self.audit)
        prev = self.audit_head
        entry = AuditLogEntry(seq, event, detail, prev, audit_hash(prev, seq, event.value, detail))
        self.audit.append(entry)
        self.audit_head = entry.entry_hash
        return entry

    def to_json(self) -> dict:
        return {
            "version": 1,
            "ca": {"cert": self.ca_cert_pem.decode(), "key": self.ca_key_pem.decode()},
            "server": {"cert": self.server_cert_pem.decode(), "key": self.server_key_pem.decode()},
            "sessions": {
                name: {
                    "id": s.session_id,
                    "policy": s.policy,
                    "secrets": {k: v.hex() for k, v in s.secrets.items()},
                    "created_at": s.created_at,
                }
                for name, s in self.sessions.items()
            },
            "counters": {k: c.to_json() for k, c in self.counters.items()},
            "audit": [e.to_json() for e in self.audit],
            "audit_head": self.audit_head.hex(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Store":
        return cls(
            ca_cert_pem=doc["ca"]["cert"].encode(),
            ca_key_pem=doc["ca"]["key"].encode(),
            server_cert_pem=doc["server"]["cert"].encode(),
            server_key_pem=doc["server"]["key"].encode(),
            sessions={
                name: StoredSession(s["id"], s["policy"],
                                    {k: bytes.fromhex(v) for k, v in s["secrets"].items()},
                                    s["created_at"])
                for name, s in doc["sessions"].items()
            },
            counters={k: CounterRecord.from_json(c) for k, c in doc["counters"].items()},
            audit=[AuditLogEntry.from_json(e) for e in doc["audit"]],
            audit_head=bytes.fromhex(doc["audit_head"]),
        )

    def encode(self) -> bytes:
        return canonical_json(self.to_json())


def seal_store(store: Store, key: bytes) -> bytes:
    nonce = os.urandom(12)
    return STORE_MAGIC + nonce + AESGCM(key).encrypt(nonce, store.encode(), STORE_MAGIC)


def unseal_store(blob: bytes, key: bytes) -> Store:
    if len(blob) < 4 + 12 + 16 or blob[:4] != STORE_MAGIC:
        raise StoreCorrupt("not a sealed store")
    try:
        plain = AESGCM(key).decrypt(blob[4:16], blob[16:], STORE_MAGIC)
    except InvalidTag:
        raise StoreCorrupt("authentication failed") from None
    try:
        store = Store.from_json(json.loads(plain))
    except (ValueError, KeyError, TypeError) as exc:
        raise StoreCorrupt(f"undecodable store: {exc}") from None
    verify_audit_chain(store.audit, store.audit_head)
    return store


_write_lock = threading.Lock()


def write_atomic(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp-{os.getpid()}-{threading.get_ident()}"
    with _write_lock:
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
