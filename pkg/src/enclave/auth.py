"""Identity, roles, tokens, sessions, and delegated role assumption.

An admin-seeded registry replaces any external identity provider while keeping
the token contract intact: access tokens live exactly 1 hour, sessions exactly
6 hours, refresh tokens are minted once per registration and usable until
revoked. Expiry boundaries are exclusive — a credential is invalid at
``t == expires_at``.

Worker instances hold a minimal default role until they assume the role of a
job's owner for the duration of that job (one unreleased grant per instance at
a time); both sides of the grant are audited.

All state mutations are serialized behind one lock, so the service is safe to
call from concurrent gateway and worker threads.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import secrets
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from .audit import ALLOWED, AuditLog
from .errors import (
    AlreadyRegistered,
    AccessDenied,
    ExpiredToken,
    GrantConflict,
    NoActiveGrant,
    RevokedToken,
    UnknownJob,
    UnknownPrincipal,
    UnknownToken,
)

ACCESS_TOKEN_LIFETIME = 3600.0      # 1 hour
SESSION_LIFETIME = 21600.0          # 6 hours


@dataclass
class Role:
    role_id: str
    description: str = ""
    is_instance_default: bool = False
    is_auditor: bool = False


@dataclass
class Principal:
    principal_id: str
    display_name: str
    roles: set[str] = field(default_factory=set)
    registered_at: float = 0.0

    def primary_role(self) -> str:
        # deterministic pick when a principal holds several roles
        return min(self.roles)


@dataclass
class AccessToken:
    token_id: str                    # the secret itself, urlsafe base64
    principal_id: str
    issued_at: float
    expires_at: float
    revoked: bool = False


@dataclass
class Session:
    session_id: str
    principal_id: str
    issued_at: float
    expires_at: float
    backing_token_id: str


@dataclass
class RefreshToken:
    token_id: str
    principal_id: str
    issued_at: float
    revoked: bool = False


@dataclass
class RoleGrant:
    instance_id: str
    assumed_role: str
    job_id: str
    granted_at: float
    released: bool = False


def _new_secret() -> str:
    return secrets.token_urlsafe(32)


def _digest(secret: str) -> str:
    # registry keys are digests so the raw secret only meets a constant-time compare
    return hashlib.sha256(secret.encode("utf-8")).hexdigest()


# hook installed by the broker: job_id -> (owner_role, assigned_instance_id) | None
JobResolver = Callable[[str], Optional[tuple[str, Optional[str]]]]


class AuthService:
    def __init__(self, clock, audit: AuditLog):
        self._clock = clock
        self._audit = audit
        self._lock = threading.RLock()
        self._roles: dict[str, Role] = {}
        self._principals: dict[str, Principal] = {}
        self._refresh: dict[str, RefreshToken] = {}      # keyed by digest
        self._access: dict[str, AccessToken] = {}        # keyed by digest
        self._sessions: dict[str, Session] = {}          # keyed by digest
        self._grants: dict[str, RoleGrant] = {}          # unreleased, by instance_id
        self._grant_history: list[RoleGrant] = []
        self._resolve_job: Optional[JobResolver] = None

    # --- registry seeding (admin surface) -----------------------------------

    def add_role(self, role: Role) -> Role:
        with self._lock:
            if role.is_instance_default and any(
                r.is_instance_default for r in self._roles.values() if r.role_id != role.role_id
            ):
                raise ValueError("exactly one instance-default role is allowed")
            self._roles[role.role_id] = role
            return role

    def add_principal(self, principal_id: str, display_name: str = "",
                      roles: Optional[set[str]] = None) -> Principal:
        with self._lock:
            roles = set(roles or ())
            unknown = roles - self._roles.keys()
            if unknown:
                raise ValueError(f"unknown roles: {sorted(unknown)}")
            p = Principal(principal_id, display_name or principal_id, roles, self._clock.now())
            self._principals[principal_id] = p
            return p

    def instance_default_role(self) -> str:
        with self._lock:
            for r in self._roles.values():
                if r.is_instance_default:
                    return r.role_id
        raise LookupError("no instance-default role seeded")

    def role(self, role_id: str) -> Role:
        with self._lock:
            return self._roles[role_id]

    def principal(self, principal_id: str) -> Principal:
        with self._lock:
            p = self._principals.get(principal_id)
            if p is None:
                raise UnknownPrincipal(principal_id)
            return p

    def bind_job_resolver(self, resolver: JobResolver) -> None:
        self._resolve_job = resolver

    # --- tokens --------------------------------------------------------------

    def register_client(self, principal_id: str, approved: bool = False) -> RefreshToken:
        """One-time issuance of a refresh token for an admin-approved principal."""
        with self._lock:
            if principal_id not in self._principals:
                raise UnknownPrincipal(principal_id)
            if not approved:
                raise AccessDenied("registration request not admin-approved")
            for tok in self._refresh.values():
                if tok.principal_id == principal_id and not tok.revoked:
                    raise AlreadyRegistered(principal_id)
            token = RefreshToken(_new_secret(), principal_id, self._clock.now())
            self._refresh[_digest(token.token_id)] = token
            return token

    def refresh_access_token(self, refresh_token: str) -> AccessToken:
        """Mint a fresh 1-hour access token; the refresh token stays usable."""
        with self._lock:
            tok = self._lookup(self._refresh, refresh_token)
            if tok is None:
                raise UnknownToken("refresh token not recognized")
            if tok.revoked:
                raise RevokedToken("refresh token revoked")
            now = self._clock.now()
            access = AccessToken(_new_secret(), tok.principal_id, now, now + ACCESS_TOKEN_LIFETIME)
            self._access[_digest(access.token_id)] = access
            return access

    def create_session(self, access_token: str) -> Session:
        """Mint a 6-hour session from a currently valid access token.

        Session validity is thereafter independent of the backing token's
        expiry; sessions authenticate but never mint new access tokens.
        """
        with self._lock:
            tok = self._checked_access(access_token)
            now = self._clock.now()
            session = Session(_new_secret(), tok.principal_id, now, now + SESSION_LIFETIME, tok.token_id)
            self._sessions[_digest(session.session_id)] = session
            return session

    def validate(self, credential: str) -> Principal:
        """Resolve an access token or session to its principal.

        Fails with ExpiredToken/RevokedToken/UnknownToken; never returns a
        principal for a credential at or past its expiry.
        """
        with self._lock:
            access = self._lookup(self._access, credential)
            if access is not None:
                self._check_lifetime(access.revoked, access.expires_at)
                return self._principals[access.principal_id]
            session = self._lookup(self._sessions, credential)
            if session is not None:
                self._check_lifetime(False, session.expires_at)
                return self._principals[session.principal_id]
            raise UnknownToken("credential not recognized")

    def revoke(self, token_id: str) -> None:
        """Permanently invalidate an access or refresh token. Idempotent."""
        with self._lock:
            tok = self._lookup(self._access, token_id) or self._lookup(self._refresh, token_id)
            if tok is None:
                raise UnknownToken("token not recognized")
            tok.revoked = True

    def _checked_access(self, secret: str) -> AccessToken:
        tok = self._lookup(self._access, secret)
        if tok is None:
            raise UnknownToken("access token not recognized")
        self._check_lifetime(tok.revoked, tok.expires_at)
        return tok

    def _check_lifetime(self, revoked: bool, expires_at: float) -> None:
        if revoked:
            raise RevokedToken("credential revoked")
        if self._clock.now() >= expires_at:    # boundary exclusive of validity
            raise ExpiredToken("credential expired")

    @staticmethod
    def _lookup(registry: dict, secret: str):
        entry = registry.get(_digest(secret))
        if entry is None:
            return None
        stored = entry.token_id if hasattr(entry, "token_id") else entry.session_id
        if not hmac.compare_digest(stored.encode(), secret.encode()):
            return None
        return entry

    # --- delegated role assumption -------------------------------------------

    def assume_role(self, instance_id: str, job_id: str) -> RoleGrant:
        """Switch an instance from the default role to the job owner's role."""
        with self._lock:
            if instance_id in self._grants:
                raise GrantConflict(f"{instance_id} already holds an unreleased grant")
            if self._resolve_job is None:
                raise UnknownJob("no job resolver bound")
            resolved = self._resolve_job(job_id)
            if resolved is None:
                raise UnknownJob(job_id)
            owner_role, assigned_to = resolved
            if assigned_to != instance_id:
                raise UnknownJob(f"{job_id} is not assigned to {instance_id}")
            grant = RoleGrant(instance_id, owner_role, job_id, self._clock.now())
            self._grants[instance_id] = grant
            self._grant_history.append(grant)
            self._audit.append(actor=instance_id, effective_role=owner_role,
                               action="role_assume", target=job_id, outcome=ALLOWED)
            return grant

    def release_role(self, instance_id: str, job_id: str) -> None:
        """End a grant; the instance reverts to the instance-default role."""
        with self._lock:
            grant = self._grants.get(instance_id)
            if grant is None or grant.job_id != job_id or grant.released:
                raise NoActiveGrant(f"no unreleased grant for ({instance_id}, {job_id})")
            grant.released = True
            del self._grants[instance_id]
            self._audit.append(actor=instance_id, effective_role=grant.assumed_role,
                               action="role_release", target=job_id, outcome=ALLOWED)

    def active_grant(self, instance_id: str) -> Optional[RoleGrant]:
        with self._lock:
            return self._grants.get(instance_id)

    # --- role directory (consumed by catalog/broker) --------------------------

    def effective_role_for_actor(self, actor: str) -> Optional[str]:
        """Current role of a principal or instance; None if the actor is unknown.

        An instance's effective role is its assumed grant role when one is
        live, the instance-default role otherwise.
        """
        with self._lock:
            p = self._principals.get(actor)
            if p is not None and p.roles:
                return p.primary_role()
            grant = self._grants.get(actor)
            if grant is not None:
                return grant.assumed_role
            if p is not None:
                return None
            try:
                return self.instance_default_role()
            except LookupError:
                return None

    def actor_is_auditor(self, actor: str) -> bool:
        with self._lock:
            p = self._principals.get(actor)
            if p is None:
                return False
            return any(self._roles[r].is_auditor for r in p.roles if r in self._roles)


# --- token file (client-side format) -----------------------------------------

TOKEN_FILE_KEY = "refresh_token"


def write_token_file(path: str, refresh_token: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{TOKEN_FILE_KEY}={refresh_token}\n")


def read_token_file(path: str) -> str:
    """Parse the line-oriented `refresh_token=<base64>` token file."""
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, value = line.split("=", 1)
            if key.strip() == TOKEN_FILE_KEY:
                return value.strip()
    raise ValueError(f"no {TOKEN_FILE_KEY} entry in {path}")
