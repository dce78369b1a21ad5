"""TLS wrapping for node-to-node channels.

Listeners and connectors speak TLS 1.3 only, authenticate peers against the
CAS root certificate, and enforce a :class:`PeerPolicy` on the peer's
common name and optional measurement extension before handing a channel to
application code. Application data travels as length-prefixed frames
(see :mod:`enclaveml.wire`).

Channel binding material is the TLS exporter output for label
``secureml-binding`` with no context, 32 bytes.
"""

from __future__ import annotations

import select
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable

from OpenSSL import SSL

from .errors import BindError, HandshakeError, NotEstablished, PeerClosed
from .pki import TLSIdentity, common_name, measurement_of
from .wire import encode_frame, read_frame

EXPORTER_LABEL = b"secureml-binding"
BINDING_LEN = 32
HANDSHAKE_TIMEOUT = 10.0

# OpenSSL X509_V_ERR_* codes that get their own reason.
_EXPIRED = {9, 10}  # not yet valid, has expired


@dataclass(frozen=True)
class PeerPolicy:
    allowed: frozenset[str]
    require_measurement: frozenset[bytes] | None = None

    def __post_init__(self):
        if not self.allowed:
            raise ValueError("peer policy needs at least one allowed name")

    @classmethod
    def of(cls, names: Iterable[str], measurements: Iterable[bytes] | None = None) -> "PeerPolicy":
        return cls(
            frozenset(names),
            frozenset(measurements) if measurements is not None else None,
        )


def parse_addr(addr: str | tuple[str, int]) -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr
    host, _, port = addr.rpartition(":")
    return (host or "127.0.0.1", int(port))


@dataclass
class _VerifyLog:
    errors: list[int] = field(default_factory=list)

    def reason(self) -> str:
        if any(e in _EXPIRED for e in self.errors):
            return "Expired"
        if self.errors:
            return "UntrustedChain"
        return "PeerRejected"


def _context(identity: TLSIdentity | None, root, require_peer_cert: bool, server: bool):
    ctx = SSL.Context(SSL.TLS_METHOD)
    ctx.set_min_proto_version(SSL.TLS1_3_VERSION)
    ctx.set_max_proto_version(SSL.TLS1_3_VERSION)
    ctx.set_options(SSL.OP_NO_TICKET)
    if identity is not None:
        ctx.use_certificate(identity.cert)
        ctx.use_privatekey(identity.key)
        ctx.check_privatekey()
    if root is None:
        if server:
            ctx.set_verify(SSL.VERIFY_NONE)
        return ctx
    from OpenSSL import crypto

    ctx.get_cert_store().add_cert(crypto.X509.from_cryptography(root))
    mode = SSL.VERIFY_PEER
    if require_peer_cert:
        mode |= SSL.VERIFY_FAIL_IF_NO_PEER_CERT

    def _record(conn, cert, errnum, depth, ok):
        if errnum:
            conn.get_app_data().errors.append(errnum)
        return ok

    ctx.set_verify(mode, _record)
    return ctx


def _no_delay(sock: socket.socket) -> None:
    # frames are small request/response pairs; Nagle + delayed ACK adds ~40 ms each
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


def _handshake(conn: SSL.Connection, sock: socket.socket, timeout: float) -> None:
    sock.setblocking(False)
    deadline = time.monotonic() + timeout
    try:
        while True:
            try:
                conn.do_handshake()
                return
            except SSL.WantReadError:
                want = ([sock], [], [])
            except SSL.WantWriteError:
                want = ([], [sock], [])
            left = deadline - time.monotonic()
            if left <= 0:
                raise HandshakeError("Timeout")
            select.select(*want, left)
    finally:
        sock.setblocking(True)


class SecureChannel:
    """One established TLS connection carrying length-prefixed frames.

    At most one sender and one receiver may use the channel at a time.
    """

    def __init__(self, conn: SSL.Connection, sock: socket.socket, established: bool = False):
        self._conn = conn
        self._sock = sock
        self.established = established
        self.peer_cert = None
        self._closed = False

    @property
    def peer_name(self) -> str | None:
        return common_name(self.peer_cert) if self.peer_cert is not None else None

    @property
    def peer_measurement(self) -> bytes | None:
        return measurement_of(self.peer_cert) if self.peer_cert is not None else None

    def channel_binding(self) -> bytes:
        if not self.established or self._closed:
            raise NotEstablished("handshake not complete")
        return self._conn.export_keying_material(EXPORTER_LABEL, BINDING_LEN)

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._conn.recv(min(n - len(buf), 1 << 20))
            except SSL.ZeroReturnError:
                raise PeerClosed("peer closed the channel") from None
            except SSL.SysCallError as exc:
                raise PeerClosed(f"connection lost: {exc}") from None
            except SSL.Error as exc:
                raise PeerClosed(f"tls failure: {exc}") from None
            if not chunk:
                raise PeerClosed("peer closed the channel")
            buf += chunk
        return bytes(buf)

    def send_frame(self, payload: bytes) -> None:
        if not self.established:
            raise NotEstablished("handshake not complete")
        frame = encode_frame(payload)
        try:
            self._conn.sendall(frame)
        except (SSL.Error, OSError) as exc:
            raise PeerClosed(f"send failed: {exc}") from None

    def recv_frame(self) -> bytes:
        if not self.established:
            raise NotEstablished("handshake not complete")
        return read_frame(self._recv_exact)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            if self.established:
                self._conn.shutdown()
        except (SSL.Error, OSError):
            pass
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _check_peer(chan: SecureChannel, policy: PeerPolicy | None) -> None:
    if policy is None:
        return
    if chan.peer_cert is None:
        raise HandshakeError("UntrustedChain", "peer presented no certificate")
    name = chan.peer_name
    if name not in policy.allowed:
        raise HandshakeError("PeerNotAllowed", repr(name))
    if policy.require_measurement is not None:
        if chan.peer_measurement not in policy.require_measurement:
            raise HandshakeError("MeasurementNotAllowed", repr(name))


def _establish(conn: SSL.Connection, sock: socket.socket, log: _VerifyLog,
               policy: PeerPolicy | None, timeout: float) -> SecureChannel:
    chan = SecureChannel(conn, sock)
    try:
        _handshake(conn, sock, timeout)
    except HandshakeError:
        sock.close()
        raise
    except (SSL.Error, OSError) as exc:
        sock.close()
        raise HandshakeError(log.reason(), str(exc)) from None
    chan.peer_cert = conn.get_peer_certificate(as_cryptography=True)
    chan.established = True
    try:
        _check_peer(chan, policy)
    except HandshakeError:
        chan.close()
        raise
    return chan


class SecureListener:
    """TLS-only listener.

    ``policy=None`` makes the client certificate optional; this is how the
    CAS accepts workers that have not been provisioned yet.
    """

    def __init__(self, addr, identity: TLSIdentity, policy: PeerPolicy | None,
                 backlog: int = 64, handshake_timeout: float = HANDSHAKE_TIMEOUT):
        self.identity = identity
        self.policy = policy
        self.handshake_timeout = handshake_timeout
        self._ctx = _context(identity, identity.root, policy is not None, server=True)
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._sock.bind(parse_addr(addr))
        except OSError as exc:
            self._sock.close()
            raise BindError(str(exc)) from None
        self._sock.listen(backlog)

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def accept_raw(self) -> socket.socket:
        sock, _ = self._sock.accept()
        _no_delay(sock)
        return sock

    def handshake(self, sock: socket.socket) -> SecureChannel:
        log = _VerifyLog()
        conn = SSL.Connection(self._ctx, sock)
        conn.set_app_data(log)
        conn.set_accept_state()
        return _establish(conn, sock, log, self.policy, self.handshake_timeout)

    def accept(self) -> SecureChannel:
        return self.handshake(self.accept_raw())

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def wrap_listen(addr, identity: TLSIdentity, policy: PeerPolicy | None) -> SecureListener:
    return SecureListener(addr, identity, policy)


def wrap_connect(addr, identity: TLSIdentity | None, policy: PeerPolicy | None,
                 root=None, timeout: float = HANDSHAKE_TIMEOUT) -> SecureChannel:
    """Connect and complete the handshake.

    With an ``identity`` the server is validated against ``identity.root``
    (or ``root`` when given) and ``policy``. A bare connection with neither
    identity nor root performs no server validation; it is only used to
    reach the CAS before provisioning.
    """
    trust = root if root is not None else (identity.root if identity is not None else None)
    ctx = _context(identity, trust, require_peer_cert=True, server=False)
    try:
        sock = socket.create_connection(parse_addr(addr), timeout=timeout)
    except OSError as exc:
        raise PeerClosed(f"connect failed: {exc}") from None
    sock.settimeout(None)
    _no_delay(sock)
    log = _VerifyLog()
    conn = SSL.Connection(ctx, sock)
    conn.set_app_data(log)
    conn.set_connect_state()
    return _establish(conn, sock, log, policy, timeout)


class ChannelServer:
    """Accept loop that hands each established channel to ``handler`` on its own thread.

    Handshake failures are recorded in :attr:`rejections` and never reach
    the handler.
    """

    def __init__(self, listener: SecureListener, handler):
        self.listener = listener
        self.handler = handler
        self.rejections: list[HandshakeError] = []
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)

    def start(self) -> "ChannelServer":
        self._thread.start()
        return self

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock = self.listener.accept_raw()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(sock,), daemon=True).start()

    def _serve(self, sock: socket.socket) -> None:
        try:
            chan = self.listener.handshake(sock)
        except HandshakeError as exc:
            self.rejections.append(exc)
            return
        with chan:
            try:
                self.handler(chan)
            except PeerClosed:
                pass

    def stop(self) -> None:
        self._stop.set()
        self.listener.close()
        self._thread.join(timeout=5)
