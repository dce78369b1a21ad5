"""Request and response models for the CAS admin API."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class SecretSpecModel(BaseModel):
    name: str
    kind: Literal["symmetric-key-256", "tls-identity", "opaque-value"]
    source: Literal["provided-by-operator", "generated-by-cas"] = "generated-by-cas"
    value: Optional[str] = Field(default=None, description="hex, operator-provided secrets only")


class InjectionModel(BaseModel):
    secret: str
    target: str = Field(description='"env:NAME" or "file:/virtual/path"')


class SessionPolicyModel(BaseModel):
    name: str
    allowed_measurements: list[str]
    secrets: list[SecretSpecModel] = []
    injections: list[InjectionModel] = []
    peers: list[str] = []


class SessionCreated(BaseModel):
    name: str
    session_id: str


class SessionInfo(BaseModel):
    name: str
    session_id: str
    allowed_measurements: list[str]
    secrets: list[str]
    injections: list[InjectionModel]
    peers: list[str]


class CounterCreate(BaseModel):
    scope: str


class CounterRecordModel(BaseModel):
    scope: str
    value: int
    last_writer: Optional[str] = None
    updated_at: int


class AuditEntryModel(BaseModel):
    sequence: int
    event: str
    detail: dict
    prev_hash: str
    entry_hash: str


class AuditStatus(BaseModel):
    valid: bool
    length: int
    head: str


class Health(BaseModel):
    status: str = "ok"
    measurement: str
    sessions: int


class ErrorBody(BaseModel):
    error: str
    detail: str = ""
