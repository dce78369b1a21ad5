from .policy import Injection, SecretKind, SecretSpec, SessionPolicy, ValueSource
from .server import CasClient, CasServer, Provisioned, provision
from .service import CasService, SecretBundle, cas_measurement, load_store
from .store import AuditEvent, AuditLogEntry, CounterRecord, verify_audit_chain

__all__ = [
    "AuditEvent", "AuditLogEntry", "CasClient", "CasServer", "CasService", "CounterRecord",
    "Injection", "Provisioned", "SecretBundle", "SecretKind", "SecretSpec", "SessionPolicy",
    "ValueSource", "cas_measurement", "load_store", "provision", "verify_audit_chain",
]
