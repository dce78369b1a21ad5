"""Session policies and their canonical encoding."""

from __future__ import annotations

import enum
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..enclave import Measurement
from ..errors import InvalidPolicy
from ..wire import pack_fields


class SecretKind(str, enum.Enum):
    SYMMETRIC_KEY_256 = "symmetric-key-256"
    TLS_IDENTITY = "tls-identity"
    OPAQUE_VALUE = "opaque-value"


class ValueSource(str, enum.Enum):
    OPERATOR = "provided-by-operator"
    GENERATED = "generated-by-cas"


@dataclass(frozen=True)
class SecretSpec:
    name: str
    kind: SecretKind
    source: ValueSource
    # Only for operator-provided secrets; never part of the canonical encoding.
    value: bytes | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class Injection:
    secret: str
    target: str  # "env:NAME" or "file:/virtual/path"

    @property
    def kind(self) -> str:
        return self.target.split(":", 1)[0]

    @property
    def location(self) -> str:
        return self.target.split(":", 1)[1]


@dataclass(frozen=True)
class SessionPolicy:
    name: str
    allowed_measurements: frozenset[Measurement]
    secrets: tuple[SecretSpec, ...] = ()
    injections: tuple[Injection, ...] = ()
    peers: tuple[str, ...] = ()

    def validate(self) -> None:
        if not self.name:
            raise InvalidPolicy("session name is empty")
        if ":" in self.name:
            raise InvalidPolicy("session name may not contain ':'")
        if not self.allowed_measurements:
            raise InvalidPolicy("allowed_measurements is empty")
        names = [s.name for s in self.secrets]
        if len(set(names)) != len(names):
            raise InvalidPolicy("duplicate secret name")
        for s in self.secrets:
            if s.kind is SecretKind.TLS_IDENTITY and s.source is not ValueSource.GENERATED:
                raise InvalidPolicy(f"tls-identity secret {s.name!r} must be generated-by-cas")
            if s.source is ValueSource.OPERATOR:
                if s.value is None:
                    raise InvalidPolicy(f"secret {s.name!r} has no operator value")
                if s.kind is SecretKind.SYMMETRIC_KEY_256 and len(s.value) != 32:
                    raise InvalidPolicy(f"secret {s.name!r} must be 32 bytes")
            elif s.value is not None:
                raise InvalidPolicy(f"secret {s.name!r} is generated but carries a value")
        for inj in self.injections:
            if inj.secret not in names:
                raise InvalidPolicy(f"injection references undeclared secret {inj.secret!r}")
            if inj.kind not in ("env", "file") or not inj.location:
                raise InvalidPolicy(f"bad injection target {inj.target!r}")

    def canonical(self) -> bytes:
        return pack_fields(
            self.name.encode(),
            pack_fields(*sorted(m.digest for m in self.allowed_measurements)),
            pack_fields(*(
                pack_fields(s.name.encode(), s.kind.value.encode(), s.source.value.encode())
                for s in self.secrets
            )),
            pack_fields(*(
                pack_fields(i.secret.encode(), i.target.encode()) for i in self.injections
            )),
            pack_fields(*(p.encode() for p in self.peers)),
        )

    def session_id(self) -> str:
        return hashlib.sha256(self.canonical()).hexdigest()

    def to_json(self, include_values: bool = False) -> dict:
        secrets = []
        for s in self.secrets:
            d = {"name": s.name, "kind": s.kind.value, "source": s.source.value}
            if include_values and s.value is not None:
                d["value"] = s.value.hex()
            secrets.append(d)
        return {
            "name": self.name,
            "allowed_measurements": sorted(m.hex for m in self.allowed_measurements),
            "secrets": secrets,
            "injections": [{"secret": i.secret, "target": i.target} for i in self.injections],
            "peers": list(self.peers),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SessionPolicy":
        try:
            secrets = tuple(
                SecretSpec(
                    s["name"],
                    SecretKind(s["kind"]),
                    ValueSource(s.get("source", ValueSource.GENERATED.value)),
                    bytes.fromhex(s["value"]) if s.get("value") is not None else None,
                )
                for s in doc.get("secrets", [])
            )
            return cls(
                name=doc["name"],
                allowed_measurements=frozenset(
                    Measurement.from_hex(h) for h in doc.get("allowed_measurements", [])
                ),
                secrets=secrets,
                injections=tuple(
                    Injection(i["secret"], i["target"]) for i in doc.get("injections", [])
                ),
                peers=tuple(doc.get("peers", [])),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise InvalidPolicy(f"malformed policy document: {exc}") from None

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SessionPolicy":
        return cls.from_json(json.loads(Path(path).read_text()))
