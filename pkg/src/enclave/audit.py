"""Append-only, hash-chained audit log.

Every signed data operation and every job lifecycle transition lands here as
one :class:`AuditEvent`. Events form a tamper-evident chain:

    this_hash = sha256(prev_hash ++ canonical-JSON of the remaining fields)

where ``prev_hash`` is the previous event's ``this_hash`` (64 zeros for the
first event) and the canonical JSON covers every field except the two hashes,
serialized with sorted keys and no whitespace. Sequence numbers are dense and
strictly increasing from 0.

The append point is globally serialized so the chain never forks.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, asdict
from typing import Iterable, Optional

GENESIS_HASH = "0" * 64

ALLOWED = "allowed"
DENIED = "denied"

# request id bound by the gateway for the duration of one HTTP request
_request_ctx = threading.local()


def bind_request_id(request_id: str) -> None:
    _request_ctx.value = request_id


def clear_request_id() -> None:
    _request_ctx.value = ""


def current_request_id() -> str:
    return getattr(_request_ctx, "value", "")


@dataclass(frozen=True)
class AuditEvent:
    seq: int
    timestamp: float
    actor: str            # principal_id or instance_id
    effective_role: str
    action: str
    target: str           # object uri or job id
    outcome: str          # "allowed" | "denied"
    request_id: str
    prev_hash: str
    this_hash: str

    def body_json(self) -> str:
        """Canonical serialization of everything the hash covers (minus prev_hash)."""
        body = asdict(self)
        body.pop("prev_hash")
        body.pop("this_hash")
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


def chain_hash(prev_hash: str, body_json: str) -> str:
    return hashlib.sha256((prev_hash + body_json).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChainVerification:
    """Truthy iff the whole chain verifies; otherwise names the first break."""

    ok: bool
    first_break: Optional[int] = None

    def __bool__(self) -> bool:
        return self.ok


class AuditLog:
    """In-memory event chain with an optional JSONL mirror on disk."""

    def __init__(self, clock, path: Optional[str] = None):
        self._clock = clock
        self._path = path
        self._events: list[AuditEvent] = []
        self._lock = threading.Lock()
        self._file = open(path, "a", encoding="utf-8") if path else None

    def append(self, *, actor: str, effective_role: str, action: str,
               target: str, outcome: str) -> AuditEvent:
        """Append one event; the single global append point for the chain."""
        if outcome not in (ALLOWED, DENIED):
            raise ValueError(f"bad outcome: {outcome!r}")
        with self._lock:
            prev = self._events[-1].this_hash if self._events else GENESIS_HASH
            event = AuditEvent(
                seq=len(self._events),
                timestamp=self._clock.now(),
                actor=actor,
                effective_role=effective_role,
                action=action,
                target=target,
                outcome=outcome,
                request_id=current_request_id(),
                prev_hash=prev,
                this_hash="",
            )
            event = AuditEvent(**{**asdict(event), "this_hash": chain_hash(prev, event.body_json())})
            self._events.append(event)
            if self._file is not None:
                self._file.write(event.to_json() + "\n")
                self._file.flush()
            return event

    def __len__(self) -> int:
        with self._lock:
            return len(self._events)

    def events(self, start: int = 0, end: Optional[int] = None) -> list[AuditEvent]:
        """Events with start <= seq < end (end=None means all)."""
        with self._lock:
            return list(self._events[start:end])

    def export_jsonl(self, start: int = 0, end: Optional[int] = None) -> str:
        """One event per line, fields exactly as on AuditEvent."""
        return "".join(e.to_json() + "\n" for e in self.events(start, end))

    def verify(self) -> ChainVerification:
        """Recompute every hash link; reports the first broken sequence number."""
        return verify_events(self.events())


def verify_events(events: Iterable[AuditEvent]) -> ChainVerification:
    prev = GENESIS_HASH
    for i, event in enumerate(events):
        if event.seq != i:
            return ChainVerification(False, i)
        if event.prev_hash != prev:
            return ChainVerification(False, i)
        if chain_hash(prev, event.body_json()) != event.this_hash:
            return ChainVerification(False, i)
        prev = event.this_hash
    return ChainVerification(True, None)


def parse_jsonl(text: str) -> list[AuditEvent]:
    events = []
    for line in text.splitlines():
        line = line.strip()
        if line:
            events.append(AuditEvent(**json.loads(line)))
    return events
