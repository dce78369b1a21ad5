"""TLS front end of the CAS and the matching client."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .. import netshield
from ..enclave import Measurement, Platform, Quote, ReportData, generate_quote
from ..errors import DecodeError, EnclaveMLError, Unauthorized
from ..pki import TLSIdentity
from ..wire import decode_message, parse_u64, unpack_fields
from . import protocol
from .policy import Injection
from .service import CasService, SecretBundle

log = logging.getLogger(__name__)


class CasServer:
    """Serves attestation and counter requests on a TLS-only listener.

    Counter operations are allowed once the connection has attested, or
    when the client presented a CAS-issued certificate; scopes must start
    with ``"<session>:"``.
    """

    def __init__(self, service: CasService, listen="127.0.0.1:0"):
        self.service = service
        listener = netshield.wrap_listen(listen, service.server_identity(), policy=None)
        self._server = netshield.ChannelServer(listener, self._handle)

    @property
    def address(self) -> tuple[str, int]:
        return self._server.listener.address

    def start(self) -> "CasServer":
        self._server.start()
        return self

    def stop(self) -> None:
        self._server.stop()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _handle(self, chan: netshield.SecureChannel) -> None:
        session = chan.peer_name
        device = b""
        while True:
            msg = chan.recv_frame()
            try:
                tag, fields = decode_message(msg)
                if tag == protocol.ATTEST_REQUEST:
                    if len(fields) != 2:
                        raise DecodeError("AttestRequest takes 2 fields")
                    bundle, injections = self.service.attest_and_provision(
                        fields[0].decode(), fields[1], chan.channel_binding())
                    session = bundle.session
                    device = Quote.decode(fields[1]).device_id
                    reply = protocol.attest_response(bundle.encode(), injections)
                elif tag == protocol.COUNTER_OP:
                    reply = self._counter(fields, session, device)
                else:
                    raise DecodeError(f"unknown message tag {tag:#x}")
            except EnclaveMLError as exc:
                reply = protocol.error(exc)
            chan.send_frame(reply)

    def _counter(self, fields: list[bytes], session: str | None, device: bytes) -> bytes:
        if len(fields) != 4:
            raise DecodeError("CounterOp takes 4 fields")
        op, scope, expected = fields[0].decode(), fields[1].decode(), parse_u64(fields[2])
        if session is None:
            raise Unauthorized("attest before using counters")
        if not scope.startswith(session + ":"):
            raise Unauthorized(f"scope outside session {session!r}")
        svc = self.service
        if op == "register":
            return protocol.counter_value(svc.register_counter(scope).value)
        if op == "advance":
            return protocol.counter_value(svc.advance_counter(scope, expected, device or fields[3]))
        if op == "read":
            return protocol.counter_value(svc.read_counter(scope))
        raise DecodeError(f"unknown counter op {op!r}")


@dataclass
class Provisioned:
    """Everything a worker receives after successful attestation."""

    session: str
    measurement: Measurement
    bundle: SecretBundle = field(repr=False)
    injections: list[Injection] = field(default_factory=list)

    def secret(self, name: str) -> bytes:
        return self.bundle.secrets[name]

    def tls_identity(self, name: str) -> TLSIdentity:
        return TLSIdentity.from_pem(self.bundle.secrets[name])

    def environment(self) -> dict[str, str]:
        return {i.location: self.bundle.secrets[i.secret].hex()
                for i in self.injections if i.kind == "env"}

    def files(self) -> dict[str, bytes]:
        return {i.location: self.bundle.secrets[i.secret]
                for i in self.injections if i.kind == "file"}


class CasClient:
    """Client side of the CAS protocol; doubles as a freshness client.

    Counter scopes passed to :meth:`read`, :meth:`register` and
    :meth:`advance` are relative to the attested session.
    """

    def __init__(self, addr, root=None, identity: TLSIdentity | None = None):
        self.channel = netshield.wrap_connect(addr, identity, None, root=root)
        self.session: str | None = identity.name if identity is not None else None
        self.device_id = b""

    def close(self) -> None:
        self.channel.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _call(self, msg: bytes, tag: int) -> list[bytes]:
        self.channel.send_frame(msg)
        return protocol.expect(self.channel.recv_frame(), tag)

    def attest(self, session: str, platform: Platform, measurement: Measurement,
               report_data: bytes | None = None) -> Provisioned:
        binding = self.channel.channel_binding()
        rd = ReportData.pad(binding if report_data is None else report_data)
        quote = generate_quote(measurement, rd, platform.device_key)
        bundle_raw, inj_raw = self._call(protocol.attest_request(session, quote.encode()),
                                         protocol.ATTEST_RESPONSE)
        bundle = SecretBundle.decode(bundle_raw)
        self.session = bundle.session
        self.device_id = platform.device_id
        return Provisioned(bundle.session, measurement, bundle, protocol.parse_injections(inj_raw))

    def _scope(self, scope: str) -> str:
        return f"{self.session}:{scope}"

    def _counter(self, op: str, scope: str, expected: int = 0) -> int:
        (value,) = self._call(protocol.counter_op(op, self._scope(scope), expected, self.device_id),
                              protocol.COUNTER_VALUE)
        return parse_u64(value)

    def register(self, scope: str) -> int:
        return self._counter("register", scope)

    def read(self, scope: str) -> int:
        return self._counter("read", scope)

    def advance(self, scope: str, expected_current: int) -> int:
        return self._counter("advance", scope, expected_current)


def provision(addr, session: str, platform: Platform, measurement: Measurement,
              root=None) -> tuple[Provisioned, CasClient]:
    """Attest to the CAS at ``addr``; returns the provisioned secrets and the open client."""
    client = CasClient(addr, root=root)
    try:
        return client.attest(session, platform, measurement), client
    except BaseException:
        client.close()
        raise
