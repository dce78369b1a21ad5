"""Transparent file protection by path prefix.

Files under a protected prefix are split into chunks. Each chunk is sealed
with AES-256-GCM under associated data ``(path, index, chunk_size)`` so a
chunk cannot be moved to another file or position. Nonces and tags live in
a manifest stored next to the file, itself AEAD-protected and bound to the
path. A manifest can optionally embed a CAS counter value; on read the
counter must still equal the authoritative one, which exposes rollback of
the file to an older authentic version.

On-disk layout::

    <path>.manifest     b"SMF1" | mode:u8 | nonce:12 | payload
    <path>.chunks/<i>   chunk i (ciphertext without tag, or plaintext in
                        auth-only mode)

Manifest body (big-endian)::

    chunk_size:u32 | total_len:u64 | count:u32 |
    count * (index:u32 | nonce:12 | tag:16 | len:u32) |
    has_freshness:u8 [| scope_len:u32 | scope | value:u64]

In encrypt mode the payload is the GCM encryption of the body; in
auth-only mode it is ``body | tag`` with the body authenticated as AAD.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import os
import shutil
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import FreshnessError, IntegrityError, UnknownScope

DEFAULT_CHUNK_SIZE = 65536
MAX_CHUNK_SIZE = 64 * 1024 * 1024
NONCE_LEN = 12
TAG_LEN = 16
MANIFEST_MAGIC = b"SMF1"
MANIFEST_SUFFIX = ".manifest"
CHUNKS_SUFFIX = ".chunks"

_HDR = struct.Struct(">4sB12s")
_BODY_HEAD = struct.Struct(">IQI")
_ENTRY = struct.Struct(">I12s16sI")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


class Mode(enum.IntEnum):
    PASSTHROUGH = 0
    AUTH_ONLY = 1
    ENCRYPT_AUTH = 2

    @classmethod
    def parse(cls, text: str) -> "Mode":
        norm = text.replace("-", "").replace("_", "").lower()
        for m in cls:
            if m.name.replace("_", "").lower() == norm:
                return m
        raise ValueError(f"unknown shield mode {text!r}")


@dataclass(frozen=True)
class PolicyEntry:
    prefix: str
    mode: Mode
    key_name: str | None = None
    freshness: bool = False


@dataclass(frozen=True)
class PathPolicy:
    entries: tuple[PolicyEntry, ...] = ()

    def __post_init__(self):
        prefixes = [e.prefix for e in self.entries]
        if len(set(prefixes)) != len(prefixes):
            raise ValueError("path policy prefixes must be unique")
        for e in self.entries:
            if e.mode is not Mode.PASSTHROUGH and not e.key_name:
                raise ValueError(f"prefix {e.prefix!r} needs a key name")

    def resolve(self, path: str) -> PolicyEntry:
        best = None
        for e in self.entries:
            if path.startswith(e.prefix) and (best is None or len(e.prefix) > len(best.prefix)):
                best = e
        return best or PolicyEntry("", Mode.PASSTHROUGH)

    def key_names(self) -> set[str]:
        return {e.key_name for e in self.entries if e.mode is not Mode.PASSTHROUGH}

    @classmethod
    def from_json(cls, doc: list[dict]) -> "PathPolicy":
        return cls(tuple(
            PolicyEntry(d["prefix"], Mode.parse(d["mode"]), d.get("key"), bool(d.get("freshness", False)))
            for d in doc
        ))

    def to_json(self) -> list[dict]:
        out = []
        for e in self.entries:
            d = {"prefix": e.prefix, "mode": e.mode.name.lower()}
            if e.key_name:
                d["key"] = e.key_name
            if e.freshness:
                d["freshness"] = True
            out.append(d)
        return out

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PathPolicy":
        return cls.from_json(json.loads(Path(path).read_text()))


def resolve_policy(policy: PathPolicy, path: str) -> tuple[Mode, str | None]:
    e = policy.resolve(path)
    return e.mode, e.key_name


class FreshnessClient(Protocol):
    def read(self, scope: str) -> int: ...
    def register(self, scope: str) -> int: ...
    def advance(self, scope: str, expected_current: int) -> int: ...


class NonceTracker:
    """Records every (key, nonce) pair issued in this process."""

    def __init__(self):
        self._seen: set[tuple[bytes, bytes]] = set()
        self._lock = threading.Lock()
        self.issued = 0

    def fresh(self, key: bytes) -> bytes:
        fp = hashlib.sha256(key).digest()[:16]
        while True:
            nonce = os.urandom(NONCE_LEN)
            with self._lock:
                if (fp, nonce) in self._seen:
                    continue
                self._seen.add((fp, nonce))
                self.issued += 1
                return nonce

    def __len__(self) -> int:
        return len(self._seen)


NONCES = NonceTracker()


@dataclass(frozen=True)
class ChunkEntry:
    index: int
    nonce: bytes
    tag: bytes
    length: int


@dataclass
class ChunkManifest:
    path: str
    mode: Mode
    chunk_size: int
    total_len: int
    chunks: list[ChunkEntry] = field(default_factory=list)
    freshness: tuple[str, int] | None = None

    def encode_body(self) -> bytes:
        out = bytearray(_BODY_HEAD.pack(self.chunk_size, self.total_len, len(self.chunks)))
        for c in self.chunks:
            out += _ENTRY.pack(c.index, c.nonce, c.tag, c.length)
        if self.freshness is None:
            out += b"\0"
        else:
            scope = self.freshness[0].encode()
            out += b"\1" + _U32.pack(len(scope)) + scope + _U64.pack(self.freshness[1])
        return bytes(out)

    @classmethod
    def decode_body(cls, path: str, mode: Mode, body: bytes) -> "ChunkManifest":
        def bad(msg):
            return IntegrityError("manifest", f"BoundsViolation: {msg}")

        if len(body) < _BODY_HEAD.size:
            raise bad("short body")
        chunk_size, total_len, count = _BODY_HEAD.unpack_from(body)
        pos = _BODY_HEAD.size
        # validate the count against the bytes actually present before using it
        if count * _ENTRY.size > len(body) - pos - 1:
            raise bad("chunk count exceeds manifest size")
        chunks = []
        for _ in range(count):
            chunks.append(ChunkEntry(*_ENTRY.unpack_from(body, pos)))
            pos += _ENTRY.size
        flag = body[pos]
        pos += 1
        fresh = None
        if flag == 1:
            if pos + 4 > len(body):
                raise bad("truncated freshness")
            (n,) = _U32.unpack_from(body, pos)
            pos += 4
            if n > len(body) - pos - 8:
                raise bad("freshness scope length")
            scope = body[pos:pos + n].decode("utf-8", errors="strict")
            pos += n
            (value,) = _U64.unpack_from(body, pos)
            pos += 8
            fresh = (scope, value)
        elif flag != 0:
            raise bad("freshness flag")
        if pos != len(body):
            raise bad("trailing bytes")
        m = cls(path, mode, chunk_size, total_len, chunks, fresh)
        sanity_check_boundary(m)
        return m


def expected_chunk_count(total_len: int, chunk_size: int) -> int:
    return max(1, math.ceil(total_len / chunk_size))


def sanity_check_boundary(m: ChunkManifest) -> ChunkManifest:
    """Validate every length and index in a manifest before it is used."""
    def bad(msg):
        return IntegrityError("manifest", f"BoundsViolation: {msg}")

    if not 1 <= m.chunk_size <= MAX_CHUNK_SIZE:
        raise bad(f"chunk size {m.chunk_size}")
    if len(m.chunks) != expected_chunk_count(m.total_len, m.chunk_size):
        raise bad("chunk count inconsistent with total length")
    total = 0
    for i, c in enumerate(m.chunks):
        if c.index != i:
            raise bad(f"chunk {i} carries index {c.index}")
        if c.length > m.chunk_size or c.length > m.total_len:
            raise bad(f"chunk {i} length {c.length}")
        if i < len(m.chunks) - 1 and c.length != m.chunk_size:
            raise bad(f"short interior chunk {i}")
        if len(c.nonce) != NONCE_LEN or len(c.tag) != TAG_LEN:
            raise bad(f"chunk {i} nonce/tag size")
        total += c.length
    if total != m.total_len:
        raise bad("chunk lengths do not sum to total length")
    return m


def manifest_path(path: str) -> str:
    return path + MANIFEST_SUFFIX


def chunks_dir(path: str) -> str:
    return path + CHUNKS_SUFFIX


def _chunk_aad(path: str, index: int, chunk_size: int) -> bytes:
    p = path.encode()
    return _U32.pack(len(p)) + p + _U32.pack(index) + _U32.pack(chunk_size)


def _atomic_write(target: str, data: bytes) -> None:
    tmp = f"{target}.tmp-{os.getpid()}-{threading.get_ident()}"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, target)


def _key_bytes(key) -> bytes:
    raw = getattr(key, "key", key)
    if len(raw) != 32:
        raise ValueError("file key must be 32 bytes")
    return raw


def shield_write(
    path: str | os.PathLike,
    data: bytes,
    key,
    freshness: FreshnessClient | None = None,
    mode: Mode = Mode.ENCRYPT_AUTH,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    scope: str | None = None,
) -> ChunkManifest:
    if mode is Mode.PASSTHROUGH:
        raise ValueError("passthrough writes bypass the shield")
    if not 1 <= chunk_size <= MAX_CHUNK_SIZE:
        raise ValueError("chunk size out of range")
    path = os.fspath(path)
    key = _key_bytes(key)
    aead = AESGCM(key)
    view = memoryview(data)
    count = expected_chunk_count(len(data), chunk_size)

    final_dir = chunks_dir(path)
    staging = f"{final_dir}.new-{os.getpid()}-{threading.get_ident()}"
    shutil.rmtree(staging, ignore_errors=True)
    os.makedirs(staging)
    entries = []
    for i in range(count):
        piece = bytes(view[i * chunk_size:(i + 1) * chunk_size])
        nonce = NONCES.fresh(key)
        aad = _chunk_aad(path, i, chunk_size)
        if mode is Mode.ENCRYPT_AUTH:
            sealed = aead.encrypt(nonce, piece, aad)
            stored, tag = sealed[:-TAG_LEN], sealed[-TAG_LEN:]
        else:
            tag = aead.encrypt(nonce, b"", aad + piece)
            stored = piece
        with open(os.path.join(staging, str(i)), "wb") as f:
            f.write(stored)
        entries.append(ChunkEntry(i, nonce, tag, len(piece)))

    manifest = ChunkManifest(path, mode, chunk_size, len(data), entries)
    if freshness is not None:
        scope = scope or path
        try:
            current = freshness.read(scope)
        except UnknownScope:
            current = freshness.register(scope)
        manifest.freshness = (scope, freshness.advance(scope, current))

    old = f"{final_dir}.old-{os.getpid()}-{threading.get_ident()}"
    if os.path.isdir(final_dir):
        os.replace(final_dir, old)
    os.replace(staging, final_dir)
    _atomic_write(manifest_path(path), _seal_manifest(manifest, key))
    shutil.rmtree(old, ignore_errors=True)
    return manifest


def _seal_manifest(m: ChunkManifest, key: bytes) -> bytes:
    nonce = NONCES.fresh(key)
    header = _HDR.pack(MANIFEST_MAGIC, int(m.mode), nonce)
    aad = header + m.path.encode()
    body = m.encode_body()
    aead = AESGCM(key)
    if m.mode is Mode.ENCRYPT_AUTH:
        return header + aead.encrypt(nonce, body, aad)
    return header + body + aead.encrypt(nonce, b"", aad + body)


def open_manifest(path: str | os.PathLike, key) -> ChunkManifest:
    path = os.fspath(path)
    key = _key_bytes(key)
    with open(manifest_path(path), "rb") as f:
        raw = f.read()
    if len(raw) < _HDR.size + TAG_LEN:
        raise IntegrityError("manifest", "truncated")
    magic, mode_byte, nonce = _HDR.unpack_from(raw)
    if magic != MANIFEST_MAGIC or mode_byte not in (Mode.AUTH_ONLY, Mode.ENCRYPT_AUTH):
        raise IntegrityError("manifest", "bad header")
    mode = Mode(mode_byte)
    aad = raw[:_HDR.size] + path.encode()
    payload = raw[_HDR.size:]
    aead = AESGCM(key)
    try:
        if mode is Mode.ENCRYPT_AUTH:
            body = aead.decrypt(nonce, payload, aad)
        else:
            body, tag = payload[:-TAG_LEN], payload[-TAG_LEN:]
            aead.decrypt(nonce, tag, aad + body)
    except InvalidTag:
        raise IntegrityError("manifest", "authentication failed") from None
    return ChunkManifest.decode_body(path, mode, body)


def shield_read(
    path: str | os.PathLike,
    key,
    freshness: FreshnessClient | None = None,
    scope: str | None = None,
) -> memoryview:
    """Verify and decrypt ``path``; returns a read-write byte view of the plaintext."""
    path = os.fspath(path)
    key = _key_bytes(key)
    m = open_manifest(path, key)

    if freshness is not None:
        scope = scope or path
        recorded = 0
        if m.freshness is not None:
            if m.freshness[0] != scope:
                raise IntegrityError("manifest", "freshness scope mismatch")
            recorded = m.freshness[1]
        try:
            stored = freshness.read(scope)
        except UnknownScope:
            stored = 0
        if stored != recorded:
            raise FreshnessError(recorded, stored)

    aead = AESGCM(key)
    # decrypt straight into one uninitialised buffer: per-chunk allocations,
    # and zero-filling a bytearray, dominated read time on large models
    view = memoryview(np.empty(m.total_len, np.uint8))
    scratch = memoryview(bytearray(m.chunk_size + TAG_LEN))
    cdir = chunks_dir(path)
    pos = 0
    for c in m.chunks:
        try:
            fd = os.open(os.path.join(cdir, str(c.index)), os.O_RDONLY)
        except FileNotFoundError:
            raise IntegrityError(c.index, "chunk missing") from None
        try:
            if os.fstat(fd).st_size != c.length:
                raise IntegrityError(c.index, "BoundsViolation: chunk file size")
            got = os.readv(fd, [scratch[:c.length]]) if c.length else 0
        finally:
            os.close(fd)
        if got != c.length:
            raise IntegrityError(c.index, "short read")
        aad = _chunk_aad(path, c.index, m.chunk_size)
        try:
            if m.mode is Mode.ENCRYPT_AUTH:
                scratch[c.length:c.length + TAG_LEN] = c.tag
                aead.decrypt_into(c.nonce, scratch[:c.length + TAG_LEN], aad, view[pos:pos + c.length])
            else:
                aead.decrypt(c.nonce, c.tag, aad + scratch[:c.length])
                view[pos:pos + c.length] = scratch[:c.length]
        except InvalidTag:
            raise IntegrityError(c.index, "authentication failed") from None
        pos += c.length
    return view


class FileShield:
    """Policy-driven front end: picks the mode and key for each path."""

    def __init__(self, policy: PathPolicy, keys: Mapping[str, bytes],
                 freshness: FreshnessClient | None = None,
                 chunk_size: int = DEFAULT_CHUNK_SIZE):
        missing = policy.key_names() - set(keys)
        if missing:
            raise ValueError(f"policy names keys not provisioned: {sorted(missing)}")
        self.policy = policy
        self._keys = dict(keys)
        self.freshness = freshness
        self.chunk_size = chunk_size

    def _fresh_for(self, entry: PolicyEntry):
        if not entry.freshness:
            return None
        if self.freshness is None:
            raise ValueError(f"prefix {entry.prefix!r} requires a freshness client")
        return self.freshness

    def write(self, path: str | os.PathLike, data: bytes) -> ChunkManifest | None:
        path = os.fspath(path)
        entry = self.policy.resolve(path)
        if entry.mode is Mode.PASSTHROUGH:
            _atomic_write(path, data)
            return None
        return shield_write(path, data, self._keys[entry.key_name], self._fresh_for(entry),
                            entry.mode, self.chunk_size)

    def read(self, path: str | os.PathLike) -> memoryview:
        path = os.fspath(path)
        entry = self.policy.resolve(path)
        if entry.mode is Mode.PASSTHROUGH:
            with open(path, "rb") as f:
                return f.read()
        return shield_read(path, self._keys[entry.key_name], self._fresh_for(entry))
