"""Operator-facing HTTP API for the CAS.

The API never returns secret material: session views list secret names
only. Provisioning happens exclusively over the attested TLS protocol in
:mod:`enclaveml.cas.server`.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse, PlainTextResponse

from .. import errors
from ..pki import cert_pem
from .policy import SessionPolicy
from .schemas import (
    AuditEntryModel,
    AuditStatus,
    CounterCreate,
    CounterRecordModel,
    Health,
    SessionCreated,
    SessionInfo,
    SessionPolicyModel,
)
from .service import CasService

_STATUS = {
    errors.DuplicateSession: 409,
    errors.DuplicateScope: 409,
    errors.InvalidPolicy: 422,
    errors.UnknownSession: 404,
    errors.UnknownScope: 404,
    errors.AuditChainBroken: 500,
}


def create_app(service: CasService) -> FastAPI:
    app = FastAPI(title="enclaveml CAS", version="0.1.0")
    app.state.cas = service

    @app.exception_handler(errors.EnclaveMLError)
    async def _domain_error(request, exc: errors.EnclaveMLError):
        return JSONResponse(status_code=_STATUS.get(type(exc), 400),
                            content={"error": exc.code, "detail": str(exc.detail)})

    @app.get("/health", response_model=Health)
    def health():
        return Health(measurement=service.measurement.hex, sessions=len(service.session_names()))

    @app.get("/ca", response_class=PlainTextResponse)
    def ca():
        return cert_pem(service.ca_cert).decode()

    @app.post("/sessions", response_model=SessionCreated, status_code=201)
    def create_session(body: SessionPolicyModel):
        policy = SessionPolicy.from_json(body.model_dump())
        return SessionCreated(name=policy.name, session_id=service.create_session(policy))

    @app.get("/sessions", response_model=list[str])
    def list_sessions():
        return service.session_names()

    @app.get("/sessions/{name}", response_model=SessionInfo)
    def get_session(name: str):
        policy = service.session_policy(name)
        doc = policy.to_json()
        return SessionInfo(
            name=policy.name,
            session_id=policy.session_id(),
            allowed_measurements=doc["allowed_measurements"],
            secrets=[s["name"] for s in doc["secrets"]],
            injections=doc["injections"],
            peers=doc["peers"],
        )

    @app.post("/counters", response_model=CounterRecordModel, status_code=201)
    def register_counter(body: CounterCreate):
        return CounterRecordModel(**service.register_counter(body.scope).to_json())

    @app.get("/counters/{scope:path}", response_model=CounterRecordModel)
    def read_counter(scope: str):
        return CounterRecordModel(**service.counter_record(scope).to_json())

    @app.get("/audit", response_model=list[AuditEntryModel])
    def audit():
        return [AuditEntryModel(**e.to_json()) for e in service.audit_entries()]

    @app.get("/audit/verify", response_model=AuditStatus)
    def audit_verify():
        try:
            head = service.verify_audit()
        except errors.AuditChainBroken as exc:
            raise HTTPException(status_code=500, detail=str(exc)) from None
        return AuditStatus(valid=True, length=len(service.audit_entries()), head=head.hex())

    return app
