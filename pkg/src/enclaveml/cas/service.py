"""Configuration and attestation service core.

All mutations go through one lock and are persisted to the sealed store
before the call returns. Quote verification runs outside the lock so a slow
verifier does not stall counter traffic.
"""

from __future__ import annotations

import logging
import os
import secrets
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from cryptography import x509
from cryptography.hazmat.primitives import serialization

from .. import pki
from ..enclave import (
    Measurement,
    Platform,
    Quote,
    TrustRoot,
    derive_sealing_key,
    measure,
    verify_quote_local,
)
from ..errors import (
    AttestationRejected,
    ChannelBindingMismatch,
    DuplicateScope,
    DuplicateSession,
    StaleCounter,
    UnknownScope,
    UnknownSession,
)
from ..wire import pack_fields, parse_u64, u64, unpack_fields
from .policy import Injection, SecretKind, SessionPolicy, ValueSource
from .store import (
    AuditEvent,
    CounterRecord,
    Store,
    StoredSession,
    seal_store,
    unseal_store,
    verify_audit_chain,
    write_atomic,
)

log = logging.getLogger(__name__)

STORE_LABEL = "cas-store"
SERVER_CN = "cas"


def cas_code() -> bytes:
    """Bytes that stand in for the CAS enclave binary."""
    here = Path(__file__).parent
    return b"".join(p.read_bytes() for p in sorted(here.glob("*.py")))


def cas_measurement() -> Measurement:
    return measure(cas_code(), b"")


@dataclass(frozen=True)
class SecretBundle:
    session: str
    secrets: dict[str, bytes] = field(repr=False)
    issued_at: int = 0

    def __repr__(self) -> str:
        return f"SecretBundle(session={self.session!r}, secrets={sorted(self.secrets)}, issued_at={self.issued_at})"

    def encode(self) -> bytes:
        return pack_fields(
            self.session.encode(),
            u64(self.issued_at),
            pack_fields(*(pack_fields(k.encode(), self.secrets[k]) for k in sorted(self.secrets))),
        )

    @classmethod
    def decode(cls, data: bytes) -> "SecretBundle":
        session, issued, items = unpack_fields(data, 3)
        out = {}
        for item in unpack_fields(items):
            k, v = unpack_fields(item, 2)
            out[k.decode()] = v
        return cls(session.decode(), out, parse_u64(issued))


def load_store(path: str | os.PathLike, device_secret: bytes, measurement: Measurement) -> Store:
    key = derive_sealing_key(device_secret, measurement, STORE_LABEL).key
    return unseal_store(Path(path).read_bytes(), key)


class CasService:
    def __init__(
        self,
        platform: Platform,
        trust_root: TrustRoot,
        store_path: str | os.PathLike | None = None,
        measurement: Measurement | None = None,
        verifier: Callable = verify_quote_local,
        leaf_days: int = pki.DEFAULT_LEAF_DAYS,
    ):
        self.platform = platform
        self.trust_root = trust_root
        self.store_path = Path(store_path) if store_path is not None else None
        self.measurement = measurement or cas_measurement()
        self.verifier = verifier
        self.leaf_days = leaf_days
        self._lock = threading.RLock()
        self._sealing_key = derive_sealing_key(platform.device_secret, self.measurement, STORE_LABEL).key
        if self.store_path is not None and self.store_path.exists():
            self.store = unseal_store(self.store_path.read_bytes(), self._sealing_key)
        else:
            self.store = self._fresh_store()
            self.persist_store()
        self._ca_cert = x509.load_pem_x509_certificate(self.store.ca_cert_pem)
        self._ca_key = serialization.load_pem_private_key(self.store.ca_key_pem, None)

    @staticmethod
    def _fresh_store() -> Store:
        ca_cert, ca_key = pki.make_root_ca()
        srv_cert, srv_key = pki.issue_leaf(ca_cert, ca_key, SERVER_CN, days=3650)
        return Store(pki.cert_pem(ca_cert), pki.key_pem(ca_key),
                     pki.cert_pem(srv_cert), pki.key_pem(srv_key))

    # -- persistence --------------------------------------------------------

    def persist_store(self) -> None:
        if self.store_path is None:
            return
        with self._lock:
            write_atomic(self.store_path, seal_store(self.store, self._sealing_key))

    @property
    def ca_cert(self) -> x509.Certificate:
        return self._ca_cert

    def server_identity(self) -> pki.TLSIdentity:
        cert = x509.load_pem_x509_certificate(self.store.server_cert_pem)
        key = serialization.load_pem_private_key(self.store.server_key_pem, None)
        return pki.TLSIdentity(cert, key, self._ca_cert)

    # -- sessions -----------------------------------------------------------

    def create_session(self, policy: SessionPolicy) -> str:
        policy.validate()
        sid = policy.session_id()
        with self._lock:
            if policy.name in self.store.sessions:
                raise DuplicateSession(policy.name)
            materialized = {}
            for spec in policy.secrets:
                if spec.source is ValueSource.OPERATOR:
                    materialized[spec.name] = spec.value
                elif spec.kind is SecretKind.TLS_IDENTITY:
                    only = next(iter(policy.allowed_measurements)).digest \
                        if len(policy.allowed_measurements) == 1 else None
                    cert, key = pki.issue_leaf(self._ca_cert, self._ca_key, policy.name,
                                               measurement=only, days=self.leaf_days)
                    materialized[spec.name] = pki.TLSIdentity(cert, key, self._ca_cert).to_pem()
                else:
                    materialized[spec.name] = secrets.token_bytes(32)
            self.store.sessions[policy.name] = StoredSession(
                sid, policy.to_json(include_values=False), materialized, int(time.time()))
            self.store.append_audit(AuditEvent.SESSION_CREATED, {"session": policy.name, "session_id": sid})
            self.persist_store()
        log.info("session %s created", policy.name)
        return sid

    def _lookup(self, session: str) -> StoredSession:
        s = self.store.sessions.get(session)
        if s is not None:
            return s
        for s in self.store.sessions.values():
            if s.session_id == session:
                return s
        raise UnknownSession(session)

    def session_policy(self, session: str) -> SessionPolicy:
        with self._lock:
            return SessionPolicy.from_json(self._lookup(session).policy)

    def session_names(self) -> list[str]:
        with self._lock:
            return sorted(self.store.sessions)

    # -- attestation --------------------------------------------------------

    def attest_and_provision(
        self, session: str, quote: Quote | bytes, channel_binding: bytes
    ) -> tuple[SecretBundle, list[Injection]]:
        if isinstance(quote, (bytes, bytearray)):
            quote = Quote.decode(bytes(quote))
        with self._lock:
            stored = self._lookup(session)
            policy = SessionPolicy.from_json(stored.policy)
        name = policy.name
        result = self.verifier(quote, policy.allowed_measurements, self.trust_root)
        detail = {"session": name, "device": quote.device_id.hex(), "measurement": quote.measurement.hex}
        if not result.accepted:
            self._record(AuditEvent.ATTEST_REJECTED, {**detail, "reason": result.reason.value})
            raise AttestationRejected(result.reason.value)
        if len(channel_binding) != 32 or quote.report_data.payload[:32] != channel_binding:
            self._record(AuditEvent.ATTEST_REJECTED, {**detail, "reason": ChannelBindingMismatch.code})
            raise ChannelBindingMismatch("quote is not bound to this channel")
        with self._lock:
            bundle = SecretBundle(name, dict(stored.secrets), int(time.time()))
            self.store.append_audit(AuditEvent.ATTEST_ACCEPTED, detail)
            self.store.append_audit(AuditEvent.SECRETS_ISSUED, {"session": name, "secrets": sorted(bundle.secrets)})
            self.persist_store()
        return bundle, list(policy.injections)

    def _record(self, event: AuditEvent, detail: dict) -> None:
        with self._lock:
            self.store.append_audit(event, detail)
            self.persist_store()

    # -- counters -----------------------------------------------------------

    def register_counter(self, scope: str) -> CounterRecord:
        with self._lock:
            if scope in self.store.counters:
                raise DuplicateScope(scope)
            rec = CounterRecord(scope, 0, None, int(time.time()))
            self.store.counters[scope] = rec
            self.persist_store()
            return CounterRecord(**vars(rec))

    def advance_counter(self, scope: str, expected_current: int, writer: bytes) -> int:
        with self._lock:
            rec = self.store.counters.get(scope)
            if rec is None:
                raise UnknownScope(scope)
            if expected_current != rec.value:
                raise StaleCounter(rec.value)
            rec.value += 1
            rec.last_writer = writer
            rec.updated_at = int(time.time())
            self.store.append_audit(AuditEvent.COUNTER_ADVANCED,
                                    {"scope": scope, "value": rec.value, "writer": writer.hex()})
            self.persist_store()
            return rec.value

    def read_counter(self, scope: str) -> int:
        return self.counter_record(scope).value

    def counter_record(self, scope: str) -> CounterRecord:
        with self._lock:
            rec = self.store.counters.get(scope)
            if rec is None:
                raise UnknownScope(scope)
            return CounterRecord(**vars(rec))

    # -- audit --------------------------------------------------------------

    def audit_entries(self):
        with self._lock:
            return list(self.store.audit)

    def verify_audit(self) -> bytes:
        with self._lock:
            return verify_audit_chain(self.store.audit, self.store.audit_head)
