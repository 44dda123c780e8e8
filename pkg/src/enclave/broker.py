"""Job intake, tiered queues, delivery tracking, and job records.

Two queue tiers exist — ``Test`` and ``Production`` — each backed by the
worker pool of the same name. Delivery is at-least-once: a dequeued job stays
invisible while its delivery's visibility deadline is in the future and the
assigned worker keeps heartbeating; a missed deadline puts the job back on the
queue with an incremented attempt counter, and after ``max_attempts`` the job
fails terminally. Terminal status is recorded at most once; stale completions
from superseded deliveries are rejected.

Job records are persisted to an append-only JSONL log (one full record per
transition); queue state is rebuilt from the log on restart, resetting
mid-flight jobs to ``queued``.

Status state machine::

    pending -> queued -> staging -> running -> completed | failed | walltime_exceeded
    queued  -> cancelled
    staging -> failed
    staging | running -> queued        (redelivery)
"""

from __future__ import annotations

import base64
import json
import os
import threading
import uuid
from dataclasses import dataclass, field, asdict
from typing import Optional

from .audit import ALLOWED, DENIED, AuditLog
from .errors import (
    AlreadyTerminal,
    AccessDenied,
    AuthFailure,
    AuthError,
    InvalidUri,
    MalformedJob,
    NoLiveDelivery,
    TooEarly,
    UnknownInstance,
    UnknownJob,
    UnknownQueue,
)
from . import catalog as _catalog

PENDING = "pending"
QUEUED = "queued"
STAGING = "staging"
RUNNING = "running"
COMPLETED = "completed"
FAILED = "failed"
CANCELLED = "cancelled"
WALLTIME_EXCEEDED = "walltime_exceeded"

TERMINAL = frozenset({COMPLETED, FAILED, CANCELLED, WALLTIME_EXCEEDED})

LEGAL_TRANSITIONS = {
    PENDING: {QUEUED},
    QUEUED: {STAGING, CANCELLED},
    STAGING: {RUNNING, FAILED, QUEUED},
    RUNNING: {COMPLETED, FAILED, WALLTIME_EXCEEDED, QUEUED},
}

SCRIPT = "script"
CANNED_FUNCTION = "canned_function"

UTILIZATION_THRESHOLD_SECONDS = 300.0    # samples only past five minutes

DEFAULT_VISIBILITY_SECONDS = 120.0
MAX_ATTEMPTS = 3

JOB_FIELDS = {
    "jobtype", "jobname", "queue", "walltime_minutes",
    "executable", "script_name", "script", "payload_b64",
    "inputs", "outputs", "requirements",
}


@dataclass(frozen=True)
class QueueTier:
    name: str
    backing_pool: str


TIERS = {
    "Test": QueueTier("Test", "Test"),
    "Production": QueueTier("Production", "Production"),
}


@dataclass
class UtilizationSample:
    job_id: str
    t_offset_seconds: float
    cpu_fraction: float
    mem_bytes: int


@dataclass
class Delivery:
    job_id: str
    instance_id: str
    delivered_at: float
    visibility_deadline: float
    attempt: int


@dataclass
class JobRecord:
    job_id: str
    owner: str
    owner_role: str
    queue: str
    jobtype: str
    jobname: str
    walltime_minutes: int
    executable: str = ""
    script_name: str = ""
    script: str = ""
    payload: bytes = b""
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    requirements: str = ""
    status: str = PENDING
    status_history: list[tuple[str, float]] = field(default_factory=list)
    stdout: bytes = b""
    stderr: bytes = b""
    utilization: list[UtilizationSample] = field(default_factory=list)
    result_uri: Optional[str] = None
    error: str = ""
    submitted_at: float = 0.0
    running_started_at: Optional[float] = None
    attempts: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["payload"] = base64.b64encode(self.payload).decode()
        d["stdout"] = base64.b64encode(self.stdout).decode()
        d["stderr"] = base64.b64encode(self.stderr).decode()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "JobRecord":
        d = dict(d)
        d["payload"] = base64.b64decode(d["payload"])
        d["stdout"] = base64.b64decode(d["stdout"])
        d["stderr"] = base64.b64decode(d["stderr"])
        d["status_history"] = [tuple(x) for x in d["status_history"]]
        d["utilization"] = [UtilizationSample(**s) for s in d["utilization"]]
        return cls(**d)


class JobLog:
    """Append-only JSONL store; the last line per job_id wins on replay."""

    def __init__(self, path: str, fsync: bool = True):
        self.path = path
        self._fsync = fsync
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        self._file = open(path, "a", encoding="utf-8")

    def append(self, record: JobRecord) -> None:
        self._file.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
        self._file.flush()
        if self._fsync:
            os.fsync(self._file.fileno())

    def replay(self) -> dict[str, JobRecord]:
        records: dict[str, JobRecord] = {}
        if not os.path.exists(self.path):
            return records
        with open(self.path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    d = json.loads(line)
                except json.JSONDecodeError:
                    continue        # torn tail write after a crash
                records[d["job_id"]] = JobRecord.from_dict(d)
        return records

    def close(self) -> None:
        self._file.close()


class Broker:
    def __init__(self, clock, audit: AuditLog, auth, store_path: Optional[str] = None,
                 max_attempts: int = MAX_ATTEMPTS, fsync: bool = True):
        self._clock = clock
        self._audit = audit
        self._auth = auth
        self._lock = threading.RLock()
        self._jobs: dict[str, JobRecord] = {}
        self._queued: dict[str, set[str]] = {name: set() for name in TIERS}
        self._deliveries: dict[str, Delivery] = {}     # live, by job_id
        self._instances: dict[str, str] = {}           # instance_id -> pool name
        self.max_attempts = max_attempts
        self._log = JobLog(store_path, fsync=fsync) if store_path else None
        if self._log is not None:
            self._recover()

    # --- recovery -------------------------------------------------------------

    def _recover(self) -> None:
        now = self._clock.now()
        for job_id, rec in self._log.replay().items():
            if rec.status in (STAGING, RUNNING):
                rec.status_history.append((QUEUED, now))
                rec.status = QUEUED
                rec.running_started_at = None
            self._jobs[job_id] = rec
            if rec.status == QUEUED:
                self._queued[rec.queue].add(job_id)

    def _persist(self, rec: JobRecord) -> None:
        if self._log is not None:
            self._log.append(rec)

    # --- instance registry ------------------------------------------------------

    def register_instance(self, instance_id: str, pool: str) -> None:
        if pool not in TIERS:
            raise UnknownQueue(pool)
        with self._lock:
            self._instances[instance_id] = pool

    def unregister_instance(self, instance_id: str) -> None:
        with self._lock:
            self._instances.pop(instance_id, None)

    def instance_pool(self, instance_id: str) -> Optional[str]:
        with self._lock:
            return self._instances.get(instance_id)

    def busy_instances(self) -> set[str]:
        """Instance ids currently holding an unexpired delivery."""
        with self._lock:
            self._expire_deliveries(self._clock.now())
            return {d.instance_id for d in self._deliveries.values()}

    # --- submission ----------------------------------------------------------------

    def submit_job(self, credential: str, description: dict) -> str:
        """Validate, persist, and enqueue one job; returns its id."""
        try:
            principal = self._auth.validate(credential)
        except AuthError as exc:
            raise AuthFailure(str(exc)) from exc
        desc = self._validated(description)
        with self._lock:
            now = self._clock.now()
            rec = JobRecord(
                job_id=uuid.uuid4().hex,
                owner=principal.principal_id,
                owner_role=principal.primary_role(),
                queue=desc["queue"],
                jobtype=desc["jobtype"],
                jobname=desc["jobname"],
                walltime_minutes=desc["walltime_minutes"],
                executable=desc.get("executable", ""),
                script_name=desc.get("script_name", ""),
                script=desc.get("script", ""),
                payload=base64.b64decode(desc.get("payload_b64", "")),
                inputs=list(desc.get("inputs", [])),
                outputs=list(desc.get("outputs", [])),
                requirements=desc.get("requirements", ""),
                submitted_at=now,
            )
            rec.status_history.append((PENDING, now))
            self._transition(rec, QUEUED)
            self._jobs[rec.job_id] = rec
            self._queued[rec.queue].add(rec.job_id)
            self._persist(rec)
            self._audit.append(actor=principal.principal_id, effective_role=rec.owner_role,
                               action="job_submit", target=rec.job_id, outcome=ALLOWED)
            return rec.job_id

    def _validated(self, description: dict) -> dict:
        if not isinstance(description, dict):
            raise MalformedJob("job description must be a JSON object")
        unknown = set(description) - JOB_FIELDS
        if unknown:
            raise MalformedJob(f"unknown fields: {sorted(unknown)}")
        missing = {"jobtype", "jobname", "queue", "walltime_minutes"} - set(description)
        if missing:
            raise MalformedJob(f"missing fields: {sorted(missing)}")
        queue = description["queue"]
        if queue not in TIERS:
            raise UnknownQueue(str(queue))
        walltime = description["walltime_minutes"]
        if not isinstance(walltime, int) or isinstance(walltime, bool) or walltime <= 0:
            raise MalformedJob("walltime_minutes must be a positive integer")
        jobtype = description["jobtype"]
        if jobtype == SCRIPT:
            for f in ("executable", "script_name", "script"):
                if not description.get(f):
                    raise MalformedJob(f"script job requires {f}")
            if description.get("payload_b64"):
                raise MalformedJob("script job must not carry payload_b64")
        elif jobtype == CANNED_FUNCTION:
            if not description.get("payload_b64"):
                raise MalformedJob("canned_function job requires payload_b64")
            if any(description.get(f) for f in ("executable", "script_name", "script")):
                raise MalformedJob("canned_function job must not carry script fields")
            try:
                base64.b64decode(description["payload_b64"], validate=True)
            except Exception as exc:
                raise MalformedJob("payload_b64 is not valid base64") from exc
        else:
            raise MalformedJob(f"unknown jobtype: {jobtype!r}")
        for uri in list(description.get("inputs", [])) + list(description.get("outputs", [])):
            try:
                _catalog.parse_uri(uri)
            except InvalidUri as exc:
                raise MalformedJob(f"bad object uri: {uri!r}") from exc
        if not isinstance(description.get("requirements", ""), str):
            raise MalformedJob("requirements must be a string")
        return description

    # --- delivery ---------------------------------------------------------------------

    def dequeue(self, instance_id: str, queue: str,
                visibility_seconds: float = DEFAULT_VISIBILITY_SECONDS) -> Optional[Delivery]:
        """Deliver the oldest visible queued job of `queue`, or None."""
        if queue not in TIERS:
            raise UnknownQueue(queue)
        with self._lock:
            pool = self._instances.get(instance_id)
            if pool is None or pool != TIERS[queue].backing_pool:
                raise UnknownInstance(f"{instance_id} is not registered to the {queue} pool")
            now = self._clock.now()
            self._expire_deliveries(now)
            candidates = self._queued[queue]
            if not candidates:
                return None
            job_id = min(candidates, key=lambda j: (self._jobs[j].submitted_at, j))
            rec = self._jobs[job_id]
            candidates.discard(job_id)
            rec.attempts += 1
            self._transition(rec, STAGING)
            self._persist(rec)
            delivery = Delivery(job_id, instance_id, now, now + float(visibility_seconds), rec.attempts)
            self._deliveries[job_id] = delivery
            return delivery

    def heartbeat(self, instance_id: str, job_id: str, extend_seconds: float) -> float:
        """Push the visibility deadline out by `extend_seconds`; returns it."""
        with self._lock:
            self._expire_deliveries(self._clock.now())
            delivery = self._live_delivery(instance_id, job_id)
            delivery.visibility_deadline += float(extend_seconds)
            return delivery.visibility_deadline

    def start_execution(self, instance_id: str, job_id: str) -> None:
        """Mark a staged job as running; walltime measurement starts here."""
        with self._lock:
            self._expire_deliveries(self._clock.now())
            self._live_delivery(instance_id, job_id)
            rec = self._jobs[job_id]
            self._transition(rec, RUNNING)
            rec.running_started_at = self._clock.now()
            self._persist(rec)

    def complete_job(self, instance_id: str, job_id: str, result_uri: str,
                     stdout: bytes = b"", stderr: bytes = b"") -> None:
        self._finish(instance_id, job_id, COMPLETED, result_uri=result_uri,
                     stdout=stdout, stderr=stderr)

    def fail_job(self, instance_id: str, job_id: str, error: str,
                 stdout: bytes = b"", stderr: bytes = b"") -> None:
        self._finish(instance_id, job_id, FAILED, error=error, stdout=stdout, stderr=stderr)

    def _finish(self, instance_id: str, job_id: str, status: str, *, result_uri: str = "",
                error: str = "", stdout: bytes = b"", stderr: bytes = b"") -> None:
        with self._lock:
            self._expire_deliveries(self._clock.now())
            rec = self._jobs.get(job_id)
            if rec is None:
                raise UnknownJob(job_id)
            if rec.status in TERMINAL:
                raise AlreadyTerminal(f"{job_id} already {rec.status}")
            delivery = self._live_delivery(instance_id, job_id)
            self._transition(rec, status)
            rec.stdout = bytes(stdout)
            rec.stderr = bytes(stderr)
            if status == COMPLETED:
                rec.result_uri = result_uri
            else:
                rec.error = error
            del self._deliveries[delivery.job_id]
            self._persist(rec)
            self._audit.append(actor=instance_id, effective_role=rec.owner_role,
                               action=f"job_{status}", target=job_id, outcome=ALLOWED)

    def _live_delivery(self, instance_id: str, job_id: str) -> Delivery:
        delivery = self._deliveries.get(job_id)
        if delivery is None or delivery.instance_id != instance_id:
            raise NoLiveDelivery(f"no live delivery of {job_id} for {instance_id}")
        return delivery

    def _expire_deliveries(self, now: float) -> None:
        for job_id in [j for j, d in self._deliveries.items() if now >= d.visibility_deadline]:
            delivery = self._deliveries.pop(job_id)
            rec = self._jobs[job_id]
            if rec.status in TERMINAL:
                continue
            if delivery.attempt >= self.max_attempts:
                self._transition(rec, FAILED)
                rec.error = "max attempts"
                self._persist(rec)
                self._audit.append(actor=delivery.instance_id, effective_role=rec.owner_role,
                                   action="job_failed", target=job_id, outcome=ALLOWED)
            else:
                self._transition(rec, QUEUED)
                rec.running_started_at = None
                self._queued[rec.queue].add(job_id)
                self._persist(rec)

    # --- reads --------------------------------------------------------------------------

    def job_status(self, credential: str, job_id: str) -> JobRecord:
        """Owner-or-auditor read of one record (status plus full history)."""
        try:
            principal = self._auth.validate(credential)
        except AuthError as exc:
            raise AuthFailure(str(exc)) from exc
        with self._lock:
            self._expire_deliveries(self._clock.now())
            rec = self._jobs.get(job_id)
            if rec is None:
                raise UnknownJob(job_id)
            if rec.owner != principal.principal_id and not self._auth.actor_is_auditor(
                    principal.principal_id):
                self._audit.append(actor=principal.principal_id,
                                   effective_role=principal.primary_role(),
                                   action="job_status", target=job_id, outcome=DENIED)
                raise AccessDenied(f"{principal.principal_id} does not own {job_id}")
            self._audit.append(actor=principal.principal_id,
                               effective_role=principal.primary_role(),
                               action="job_status", target=job_id, outcome=ALLOWED)
            return rec

    def record(self, job_id: str) -> JobRecord:
        """Trusted in-process read (worker and gateway internals)."""
        with self._lock:
            rec = self._jobs.get(job_id)
            if rec is None:
                raise UnknownJob(job_id)
            return rec

    def queue_depth(self, queue: str) -> int:
        if queue not in TIERS:
            raise UnknownQueue(queue)
        with self._lock:
            return len(self._queued[queue])

    def resolve_for_grant(self, job_id: str) -> Optional[tuple[str, Optional[str]]]:
        """Hook for auth.assume_role: (owner_role, currently assigned instance)."""
        with self._lock:
            rec = self._jobs.get(job_id)
            if rec is None:
                return None
            delivery = self._deliveries.get(job_id)
            return rec.owner_role, delivery.instance_id if delivery else None

    # --- lifecycle management --------------------------------------------------------------

    def cancel_job(self, credential: str, job_id: str) -> None:
        """Owner-initiated cancellation of a still-queued job."""
        try:
            principal = self._auth.validate(credential)
        except AuthError as exc:
            raise AuthFailure(str(exc)) from exc
        with self._lock:
            rec = self._jobs.get(job_id)
            if rec is None:
                raise UnknownJob(job_id)
            if rec.owner != principal.principal_id:
                raise AccessDenied(f"{principal.principal_id} does not own {job_id}")
            if rec.status in TERMINAL:
                raise AlreadyTerminal(f"{job_id} already {rec.status}")
            if rec.status != QUEUED:
                raise NoLiveDelivery(f"{job_id} is {rec.status}; only queued jobs cancel")
            self._transition(rec, CANCELLED)
            self._queued[rec.queue].discard(job_id)
            self._persist(rec)
            self._audit.append(actor=principal.principal_id, effective_role=rec.owner_role,
                               action="job_cancelled", target=job_id, outcome=ALLOWED)

    def enforce_walltime(self, now: Optional[float] = None) -> list[str]:
        """Kill every running job whose elapsed time strictly exceeds its walltime."""
        with self._lock:
            now = self._clock.now() if now is None else now
            self._expire_deliveries(now)
            transitioned = []
            for rec in self._jobs.values():
                if rec.status != RUNNING or rec.running_started_at is None:
                    continue
                if now - rec.running_started_at > rec.walltime_minutes * 60.0:
                    self._transition(rec, WALLTIME_EXCEEDED)
                    rec.error = "walltime exceeded"
                    self._deliveries.pop(rec.job_id, None)
                    self._persist(rec)
                    self._audit.append(actor="broker", effective_role=rec.owner_role,
                                       action="job_walltime_exceeded", target=rec.job_id,
                                       outcome=ALLOWED)
                    transitioned.append(rec.job_id)
            return transitioned

    def record_utilization(self, instance_id: str, job_id: str, sample: UtilizationSample) -> None:
        """Accept one utilization sample for a job running longer than 5 minutes."""
        with self._lock:
            now = self._clock.now()
            self._expire_deliveries(now)
            delivery = self._live_delivery(instance_id, job_id)
            rec = self._jobs[delivery.job_id]
            if rec.status != RUNNING or rec.running_started_at is None:
                raise NoLiveDelivery(f"{job_id} is not running")
            elapsed = now - rec.running_started_at
            if elapsed <= UTILIZATION_THRESHOLD_SECONDS or \
                    sample.t_offset_seconds <= UTILIZATION_THRESHOLD_SECONDS:
                raise TooEarly(f"{job_id} running {elapsed:.0f}s; samples start past 300s")
            sample.cpu_fraction = min(1.0, max(0.0, sample.cpu_fraction))
            rec.utilization.append(sample)
            rec.utilization.sort(key=lambda s: s.t_offset_seconds)

    # --- internals -----------------------------------------------------------------------

    def _transition(self, rec: JobRecord, new_status: str) -> None:
        legal = LEGAL_TRANSITIONS.get(rec.status, set())
        if new_status not in legal:
            if rec.status in TERMINAL:
                raise AlreadyTerminal(f"{rec.job_id} already {rec.status}")
            raise RuntimeError(f"illegal transition {rec.status} -> {new_status}")
        rec.status = new_status
        rec.status_history.append((new_status, self._clock.now()))

    def close(self) -> None:
        if self._log is not None:
            self._log.close()
