"""Protected object store with per-role policies, signed requests, and tiering.

Objects live under ``s3://<bucket>/<key>`` URIs. The cold tier is a
content-addressed directory (one file per distinct checksum); the hot tier is
a bounded cache directory. Every read promotes the object to hot and evicts
least-recently-used residents when the capacity bound would be exceeded.

Access control is default-deny: an action is allowed only when an explicit
policy row grants it to the caller's effective role, either for the exact
object URI or for its bucket URI. Every data operation — including denied
ones — appends to the hash-chained audit log.

Reads go through signed requests: an HMAC-SHA256 over the canonical string
``action\\nuri\\nactor\\nexpires_at`` (expires_at formatted ``%.6f``), keyed by
the server secret and verified in constant time.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import re
import threading
from dataclasses import dataclass
from typing import Iterable, Optional, Protocol

from .audit import ALLOWED, DENIED, AuditLog, ChainVerification
from .errors import (
    AccessDenied,
    BadSignature,
    ExpiredSignature,
    InvalidUri,
    UnknownObject,
)

ACTIONS = ("read", "write", "delete", "export")

COLD = "cold"
HOT = "hot"

_URI_RE = re.compile(r"^s3://(?P<bucket>[a-zA-Z0-9._-]+)/(?P<key>[^\s]+)$")
_BUCKET_RE = re.compile(r"^s3://(?P<bucket>[a-zA-Z0-9._-]+)$")


def parse_uri(uri: str) -> tuple[str, str]:
    m = _URI_RE.match(uri)
    if not m:
        raise InvalidUri(uri)
    return m.group("bucket"), m.group("key")


def bucket_uri(uri: str) -> str:
    bucket, _ = parse_uri(uri)
    return f"s3://{bucket}"


def is_bucket_uri(uri: str) -> bool:
    return _BUCKET_RE.match(uri) is not None


@dataclass
class StoredObject:
    uri: str
    size_bytes: int
    owner_role: str
    checksum: str          # sha256 hex of the object bytes
    created_at: float


@dataclass
class AccessPolicy:
    uri: str               # object uri or bucket uri (s3://bucket)
    role_id: str
    allowed_actions: set[str]


@dataclass
class TierState:
    uri: str
    tier: str = COLD
    last_access: float = 0.0
    access_count: int = 0


@dataclass(frozen=True)
class SignedRequest:
    uri: str
    action: str
    actor: str             # principal_id or instance_id
    issued_at: float
    expires_at: float
    signature: str

    def canonical(self) -> str:
        return canonical_string(self.action, self.uri, self.actor, self.expires_at)


def canonical_string(action: str, uri: str, actor: str, expires_at: float) -> str:
    return f"{action}\n{uri}\n{actor}\n{expires_at:.6f}"


@dataclass
class Migration:
    uri: str
    src: str
    dst: str
    reason: str


class RoleDirectory(Protocol):
    """The slice of the auth service the catalog needs."""

    def effective_role_for_actor(self, actor: str) -> Optional[str]: ...
    def actor_is_auditor(self, actor: str) -> bool: ...


class Catalog:
    def __init__(self, clock, audit: AuditLog, roles: RoleDirectory, data_dir: str,
                 hot_capacity_bytes: int = 64 * 1024 * 1024,
                 signing_key: Optional[bytes] = None,
                 encrypt_cold: bool = False,
                 encryption_key: Optional[bytes] = None):
        self._clock = clock
        self._audit = audit
        self._roles = roles
        self._key = signing_key or os.urandom(32)
        self._encrypt = encrypt_cold
        self._enc_key = encryption_key or os.urandom(32)
        self.hot_capacity_bytes = int(hot_capacity_bytes)
        self._cold_dir = os.path.join(data_dir, "cold")
        self._hot_dir = os.path.join(data_dir, "hot")
        os.makedirs(self._cold_dir, exist_ok=True)
        os.makedirs(self._hot_dir, exist_ok=True)
        self._objects: dict[str, StoredObject] = {}
        self._policies: dict[tuple[str, str], AccessPolicy] = {}   # (uri, role)
        self._tiers: dict[str, TierState] = {}
        self._lock = threading.RLock()

    # --- policy table ---------------------------------------------------------

    def grant(self, uri: str, role_id: str, actions: Iterable[str]) -> AccessPolicy:
        """Insert or extend one policy row. `uri` may be an object or a bucket."""
        actions = set(actions)
        bad = actions - set(ACTIONS)
        if bad:
            raise ValueError(f"unknown actions: {sorted(bad)}")
        if not is_bucket_uri(uri):
            parse_uri(uri)
        with self._lock:
            row = self._policies.get((uri, role_id))
            if row is None:
                row = AccessPolicy(uri, role_id, set())
                self._policies[(uri, role_id)] = row
            row.allowed_actions |= actions
            return row

    def revoke_grant(self, uri: str, role_id: str, actions: Optional[Iterable[str]] = None) -> None:
        with self._lock:
            row = self._policies.get((uri, role_id))
            if row is None:
                return
            if actions is None:
                del self._policies[(uri, role_id)]
            else:
                row.allowed_actions -= set(actions)
                if not row.allowed_actions:
                    del self._policies[(uri, role_id)]

    def check_access(self, effective_role: Optional[str], uri: str, action: str) -> bool:
        """Pure function of the policy table; absence of a row means deny."""
        if effective_role is None:
            return False
        with self._lock:
            row = self._policies.get((uri, effective_role))
            if row is not None and action in row.allowed_actions:
                return True
            try:
                brow = self._policies.get((bucket_uri(uri), effective_role))
            except InvalidUri:
                return False
            return brow is not None and action in brow.allowed_actions

    # --- objects ---------------------------------------------------------------

    def put_object(self, actor: str, uri: str, data: bytes) -> StoredObject:
        """Store bytes at `uri`. Creating a new object makes the caller's role
        its owner with explicit read/write/delete rows; overwriting an existing
        object requires a `write` grant."""
        parse_uri(uri)
        with self._lock:
            role = self._roles.effective_role_for_actor(actor)
            existing = self._objects.get(uri)
            if existing is not None and not self.check_access(role, uri, "write"):
                self._audit.append(actor=actor, effective_role=role or "", action="write",
                                   target=uri, outcome=DENIED)
                raise AccessDenied(f"{actor} may not write {uri}")
            if existing is None and role is None:
                self._audit.append(actor=actor, effective_role="", action="write",
                                   target=uri, outcome=DENIED)
                raise AccessDenied(f"{actor} has no role; cannot create {uri}")
            checksum = hashlib.sha256(data).hexdigest()
            self._write_cold(uri, checksum, data)
            now = self._clock.now()
            owner = existing.owner_role if existing is not None else role
            obj = StoredObject(uri, len(data), owner, checksum, now)
            self._objects[uri] = obj
            state = self._tiers.setdefault(uri, TierState(uri))
            if state.tier == HOT:
                # keep the hot copy coherent with the new bytes
                if len(data) > self.hot_capacity_bytes:
                    state.tier = COLD
                    self._remove_hot(uri)
                else:
                    self._write_hot(uri, data)
                    self._enforce_capacity(exclude=uri)
            if existing is None:
                self.grant(uri, owner, ("read", "write", "delete"))
            self._audit.append(actor=actor, effective_role=role, action="write",
                               target=uri, outcome=ALLOWED)
            return obj

    def sign_url(self, actor: str, uri: str, action: str, ttl_seconds: float) -> SignedRequest:
        """MAC a read/write/delete/export capability for `actor` over `uri`."""
        if action not in ACTIONS:
            raise ValueError(f"unknown action: {action}")
        parse_uri(uri)
        with self._lock:
            role = self._roles.effective_role_for_actor(actor)
            if not self.check_access(role, uri, action):
                self._audit.append(actor=actor, effective_role=role or "", action=f"sign:{action}",
                                   target=uri, outcome=DENIED)
                raise AccessDenied(f"{actor} may not {action} {uri}")
            now = self._clock.now()
            expires = now + float(ttl_seconds)
            sig = self._mac(canonical_string(action, uri, actor, expires))
            self._audit.append(actor=actor, effective_role=role, action=f"sign:{action}",
                               target=uri, outcome=ALLOWED)
            return SignedRequest(uri, action, actor, now, expires, sig)

    def get_object(self, request: SignedRequest) -> bytes:
        """Redeem a signed read. Verifies the MAC and expiry, re-checks policy
        against the actor's *current* effective role, bumps access stats, and
        promotes the object to the hot tier."""
        with self._lock:
            role = self._roles.effective_role_for_actor(request.actor)
            expected = self._mac(request.canonical())
            if not hmac.compare_digest(expected, request.signature):
                self._audit.append(actor=request.actor, effective_role=role or "",
                                   action="read", target=request.uri, outcome=DENIED)
                raise BadSignature(request.uri)
            if self._clock.now() >= request.expires_at:
                self._audit.append(actor=request.actor, effective_role=role or "",
                                   action="read", target=request.uri, outcome=DENIED)
                raise ExpiredSignature(request.uri)
            if request.action != "read" or not self.check_access(role, request.uri, "read"):
                self._audit.append(actor=request.actor, effective_role=role or "",
                                   action="read", target=request.uri, outcome=DENIED)
                raise AccessDenied(f"{request.actor} may not read {request.uri}")
            obj = self._objects.get(request.uri)
            if obj is None:
                self._audit.append(actor=request.actor, effective_role=role or "",
                                   action="read", target=request.uri, outcome=DENIED)
                raise UnknownObject(request.uri)
            data = self._read_bytes(obj)
            state = self._tiers[obj.uri]
            state.access_count += 1
            state.last_access = self._clock.now()
            self._promote(obj, data)
            self._audit.append(actor=request.actor, effective_role=role, action="read",
                               target=request.uri, outcome=ALLOWED)
            return data

    def delete_object(self, actor: str, uri: str) -> None:
        with self._lock:
            role = self._roles.effective_role_for_actor(actor)
            if not self.check_access(role, uri, "delete"):
                self._audit.append(actor=actor, effective_role=role or "", action="delete",
                                   target=uri, outcome=DENIED)
                raise AccessDenied(f"{actor} may not delete {uri}")
            obj = self._objects.pop(uri, None)
            if obj is None:
                self._audit.append(actor=actor, effective_role=role or "", action="delete",
                                   target=uri, outcome=DENIED)
                raise UnknownObject(uri)
            state = self._tiers.pop(uri, None)
            if state is not None and state.tier == HOT:
                self._remove_hot(uri)
            if not any(o.checksum == obj.checksum for o in self._objects.values()):
                self._remove_cold(obj.checksum)
            self._audit.append(actor=actor, effective_role=role, action="delete",
                               target=uri, outcome=ALLOWED)

    def stat(self, uri: str) -> StoredObject:
        with self._lock:
            obj = self._objects.get(uri)
            if obj is None:
                raise UnknownObject(uri)
            return obj

    def exists(self, uri: str) -> bool:
        with self._lock:
            return uri in self._objects

    def tier_state(self, uri: str) -> TierState:
        with self._lock:
            state = self._tiers.get(uri)
            if state is None:
                raise UnknownObject(uri)
            return state

    def hot_set(self) -> set[str]:
        with self._lock:
            return {u for u, s in self._tiers.items() if s.tier == HOT}

    def hot_bytes_in_use(self) -> int:
        with self._lock:
            return sum(self._objects[u].size_bytes for u in self.hot_set())

    # --- tier maintenance -------------------------------------------------------

    def run_tier_maintenance(self, now: Optional[float] = None) -> list[Migration]:
        """Enforce the hot-capacity bound, evicting in least-recently-used order."""
        with self._lock:
            return self._enforce_capacity()

    def _promote(self, obj: StoredObject, data: bytes) -> None:
        state = self._tiers[obj.uri]
        if obj.size_bytes > self.hot_capacity_bytes:
            return                      # can never fit; stays cold
        if state.tier != HOT:
            self._write_hot(obj.uri, data)
            state.tier = HOT
        self._enforce_capacity(exclude=obj.uri)

    def _enforce_capacity(self, exclude: Optional[str] = None) -> list[Migration]:
        migrations: list[Migration] = []
        hot = [self._tiers[u] for u in self.hot_set()]
        in_use = sum(self._objects[s.uri].size_bytes for s in hot)
        # least recently used first; never evict the object just accessed
        for state in sorted(hot, key=lambda s: (s.last_access, s.uri)):
            if in_use <= self.hot_capacity_bytes:
                break
            if state.uri == exclude:
                continue
            state.tier = COLD
            self._remove_hot(state.uri)
            in_use -= self._objects[state.uri].size_bytes
            migrations.append(Migration(state.uri, HOT, COLD, "lru_evict"))
        return migrations

    # --- audit surface ------------------------------------------------------------

    def read_audit(self, actor: str, start: int = 0, end: Optional[int] = None):
        with self._lock:
            if not self._roles.actor_is_auditor(actor):
                role = self._roles.effective_role_for_actor(actor)
                self._audit.append(actor=actor, effective_role=role or "",
                                   action="audit_read", target="audit", outcome=DENIED)
                raise AccessDenied(f"{actor} holds no auditor role")
        return self._audit.events(start, end)

    def export_audit(self, actor: str, start: int = 0, end: Optional[int] = None) -> str:
        self.read_audit(actor, start, start)   # permission gate only
        return self._audit.export_jsonl(start, end)

    def verify_chain(self) -> ChainVerification:
        return self._audit.verify()

    # --- storage plumbing ----------------------------------------------------------

    def _mac(self, canonical: str) -> str:
        return hmac.new(self._key, canonical.encode("utf-8"), hashlib.sha256).hexdigest()

    def _cold_path(self, checksum: str) -> str:
        return os.path.join(self._cold_dir, checksum)

    def _hot_path(self, uri: str) -> str:
        return os.path.join(self._hot_dir, hashlib.sha256(uri.encode()).hexdigest())

    def _keystream_xor(self, checksum: str, data: bytes) -> bytes:
        out = bytearray(len(data))
        block = b""
        counter = 0
        for i in range(len(data)):
            if i % 32 == 0:
                block = hmac.new(self._enc_key, f"{checksum}:{counter}".encode(),
                                 hashlib.sha256).digest()
                counter += 1
            out[i] = data[i] ^ block[i % 32]
        return bytes(out)

    def _write_cold(self, uri: str, checksum: str, data: bytes) -> None:
        path = self._cold_path(checksum)
        if not os.path.exists(path):
            payload = self._keystream_xor(checksum, data) if self._encrypt else data
            tmp = path + ".tmp"
            with open(tmp, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        old = self._objects.get(uri)
        if old is not None and old.checksum != checksum:
            if not any(o.checksum == old.checksum for u, o in self._objects.items() if u != uri):
                self._remove_cold(old.checksum)

    def _read_bytes(self, obj: StoredObject) -> bytes:
        state = self._tiers.get(obj.uri)
        if state is not None and state.tier == HOT and os.path.exists(self._hot_path(obj.uri)):
            with open(self._hot_path(obj.uri), "rb") as fh:
                return fh.read()
        with open(self._cold_path(obj.checksum), "rb") as fh:
            raw = fh.read()
        return self._keystream_xor(obj.checksum, raw) if self._encrypt else raw

    def _write_hot(self, uri: str, data: bytes) -> None:
        with open(self._hot_path(uri), "wb") as fh:
            fh.write(data)

    def _remove_hot(self, uri: str) -> None:
        try:
            os.remove(self._hot_path(uri))
        except FileNotFoundError:
            pass

    def _remove_cold(self, checksum: str) -> None:
        try:
            os.remove(self._cold_path(checksum))
        except FileNotFoundError:
            pass
